"""Command-line pipeline: gen-data, stats, train, eval, report.

All paths are resolved relative to --workdir (overridden by the
SEGADAPT_WORKDIR environment variable). A lock file guards each workdir so
concurrent invocations on the same directory fail fast instead of racing.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint
from .config import load_train_config
from .metrics import ConfusionMatrix, iou
from .model import ModelConfig, SegModel, predict
from .report import plot_iou_bars, plot_loss_curves, read_eval, write_eval, write_report
from .stats import compute_stats, load_stats, save_stats
from .synth import apply_shift, generate_domain, load_dataset, load_manifest, preset
from .train import init_state, load_state, run_phase, save_state, LOG_HEADER

LOCK_NAME = ".segadapt.lock"


@contextlib.contextmanager
def workdir_lock(workdir):
    os.makedirs(workdir, exist_ok=True)
    path = os.path.join(workdir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"workdir {workdir} is locked by another run "
                           f"(remove {path} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _materialize(manifest_path, with_labels=True):
    manifest = load_manifest(manifest_path)
    return list(load_dataset(manifest, with_labels=with_labels)), manifest


def cmd_gen_data(args, workdir) -> int:
    src_cfg, shift = preset(args.preset, seed=args.seed)
    tgt_cfg = apply_shift(src_cfg, shift)
    out = os.path.join(workdir, args.out)
    n_val = max(args.n // 5, 8)
    n_test = max(args.n // 4, 16)
    splits = [
        ("source_train", src_cfg, args.n),
        ("source_val", replace(src_cfg, seed=args.seed + 1), n_val),
        ("target_train", replace(tgt_cfg, seed=args.seed + 2), args.n),
        ("target_test", replace(tgt_cfg, seed=args.seed + 3), n_test),
    ]
    for name, cfg, n in splits:
        manifest = generate_domain(cfg, n, os.path.join(out, name))
        print(f"{name}: {n} pairs, config {manifest['config_hash'][:12]}")
    return 0


def cmd_stats(args, workdir) -> int:
    data, manifest = _materialize(os.path.join(workdir, args.manifest))
    stats = compute_stats([lab for _, lab in data], manifest["num_classes"])
    save_stats(stats, os.path.join(workdir, args.out))
    print(f"stats over {len(data)} images -> {args.out}")
    return 0


def cmd_train(args, workdir) -> int:
    cfg = load_train_config(os.path.join(workdir, args.config))
    phase = args.phase.replace("-", "_")
    state = (load_state(os.path.join(workdir, args.resume), cfg)
             if args.resume else init_state(cfg))

    datasets = {}
    datasets["source_train"], _ = _materialize(os.path.join(workdir, cfg.source_train))
    datasets["source_val"], _ = _materialize(os.path.join(workdir, cfg.source_val))
    if phase != "source":
        tgt, _ = _materialize(os.path.join(workdir, cfg.target_train), with_labels=False)
        datasets["target_train"] = [img for img, _ in tgt]
        with contextlib.suppress(FileNotFoundError):
            datasets["target_test"], _ = _materialize(os.path.join(workdir, cfg.target_test))
    if phase == "ga_ca":
        datasets["stats"] = load_stats(os.path.join(workdir, cfg.stats_path))

    os.makedirs(os.path.join(workdir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(workdir, "logs"), exist_ok=True)
    ckpt = os.path.join(workdir, "checkpoints", f"{phase}.ckpt")
    log_path = os.path.join(workdir, "logs", f"{phase}.tsv")
    new_log = not os.path.exists(log_path)
    with open(log_path, "a") as log:
        if new_log:
            log.write(LOG_HEADER + "\n")
        metrics = run_phase(phase, state, datasets, cfg, log=log, checkpoint_path=ckpt)
    save_state(ckpt, state, cfg)
    plot_loss_curves(log_path, os.path.join(workdir, "logs", f"{phase}_curves.png"))
    if metrics:
        print(f"{phase}: {len(metrics)} epochs, final {metrics[-1].row()}")
    else:
        print(f"{phase}: 0 epochs configured; state unchanged")
    return 0


def cmd_eval(args, workdir) -> int:
    tensors, meta = load_checkpoint(os.path.join(workdir, args.checkpoint))
    model = SegModel(ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in meta["model_config"].items()}))
    params = model.params()
    for name, value in tensors.items():
        if name.startswith("model/"):
            params[name[len("model/"):]][...] = value
    data, manifest = _materialize(os.path.join(workdir, args.manifest))
    if manifest["num_classes"] != model.config.num_classes:
        raise ValueError(
            f"label-space mismatch: checkpoint has {model.config.num_classes} "
            f"classes, manifest has {manifest['num_classes']}")
    cm = ConfusionMatrix(model.config.num_classes)
    for img, lab in data:
        cm.accumulate(predict(model.forward_scores(img)), lab)
    per_class, miou = iou(cm)
    name = os.path.splitext(os.path.basename(args.out))[0]
    write_eval(os.path.join(workdir, args.out), name, per_class, miou,
               {"checkpoint": args.checkpoint, "manifest": args.manifest,
                "config_hash": meta.get("config_hash", "")})
    print(f"mIoU {miou:.4f} over {len(data)} images -> {args.out}")
    return 0


def cmd_report(args, workdir) -> int:
    evals = [read_eval(os.path.join(workdir, p)) for p in args.evals]
    out = os.path.join(workdir, args.out)
    text = write_report(evals, out)
    plot_iou_bars(evals, os.path.splitext(out)[0] + ".png")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="Domain-adaptive toy segmentation: data generation, "
                    "training phases, evaluation, and reports.")
    parser.add_argument("--workdir", default=".",
                        help="root for all relative paths (env SEGADAPT_WORKDIR overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate paired synthetic domains")
    p.add_argument("--preset", required=True, choices=["small", "medium", "large"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="compute source class-layout statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="run a training phase")
    p.add_argument("--phase", required=True, choices=["source", "ga", "ga-ca"])
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval outputs into a table and figure")
    p.add_argument("--evals", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    workdir = os.environ.get("SEGADAPT_WORKDIR") or args.workdir
    try:
        with workdir_lock(workdir):
            return args.func(args, workdir)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
