"""Training orchestration: source pretraining, global alignment (GA), and
category-specific adaptation (GA+CA) under the three-term joint objective
seg + lambda_da * adversarial + lambda_mi * constrained-MIL.

The segmentation term stays active in every phase so the model never drifts
far from the source solution. Inside the joint objective the adversarial
term is averaged per spatial unit and the MIL term per target image, so the
lambda weights are batch- and resolution-independent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .adversary import (DomainClassifier, domain_loss, fit_domain_classifier,
                        inverse_domain_loss)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PhaseConfig, TrainConfig
from .metrics import ConfusionMatrix, iou
from .mil import (ProjectionInfeasibleError, build_constraints, class_weights,
                  infer_image_labels, mil_loss, project_to_constraints)
from .model import SegModel, predict, seg_loss, softmax
from .optim import SGD
from .stats import ClassStats

PHASES = ("source", "ga", "ga_ca")


@dataclass
class TrainState:
    model: SegModel
    clf: DomainClassifier
    opt_model: SGD
    opt_clf: SGD
    phase: str = "source"
    epoch: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.params().items()}
        out.update({f"domain/{k}": v for k, v in self.clf.params.items()})
        out.update({f"opt_model/{k}": v for k, v in self.opt_model.velocity.items()})
        out.update({f"opt_domain/{k}": v for k, v in self.opt_clf.velocity.items()})
        return out


def init_state(cfg: TrainConfig) -> TrainState:
    model = SegModel(cfg.model)
    clf = DomainClassifier(cfg.model.feature_dim,
                           hidden=cfg.phases["ga"].domain_hidden,
                           seed=cfg.seed + 1)
    return TrainState(model, clf,
                      SGD(cfg.phases["source"].lr_model, cfg.momentum),
                      SGD(cfg.phases["ga"].lr_domain, cfg.momentum))


def save_state(path, state: TrainState, cfg: TrainConfig):
    meta = {"phase": state.phase, "epoch": state.epoch,
            "config_hash": cfg.hash(), "num_classes": cfg.model.num_classes,
            "model_config": asdict(cfg.model),
            "domain_hidden": state.clf.hidden}
    save_checkpoint(path, state.tensors(), meta)


def load_state(path, cfg: TrainConfig, check_hash: bool = True) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if check_hash and meta.get("config_hash") != cfg.hash():
        raise CheckpointError(
            f"checkpoint {path} was written under config hash "
            f"{meta.get('config_hash')}, current config hashes to {cfg.hash()}; "
            "refusing to resume across configs")
    state = init_state(cfg)
    state.phase = meta.get("phase", "source")
    state.epoch = int(meta.get("epoch", 0))
    params = state.tensors()
    for name, value in tensors.items():
        if name.startswith("opt_model/"):
            state.opt_model.velocity[name[len("opt_model/"):]] = value
        elif name.startswith("opt_domain/"):
            state.opt_clf.velocity[name[len("opt_domain/"):]] = value
        elif name in params:
            params[name][...] = value
        else:
            raise CheckpointError(f"checkpoint tensor {name!r} does not match the model")
    return state


# -- joint objective -----------------------------------------------------


def make_pseudo_targets(model: SegModel, target_images, stats: ClassStats):
    """Per-image (projected distribution, class weights) or None when no class
    passes the presence test or the constraints cannot be met."""
    w = class_weights(stats)
    out = []
    for img in target_images:
        scores = model.forward_scores(img)
        present = infer_image_labels(predict(scores), stats)
        if not present:
            out.append(None)
            continue
        cons = build_constraints(present, stats)
        try:
            q = project_to_constraints(softmax(scores), cons)
        except ProjectionInfeasibleError:
            out.append(None)
            continue
        out.append((q, w))
    return out


def joint_loss(model: SegModel, clf: DomainClassifier, batch_src, batch_tgt,
               phase: PhaseConfig, pseudo_targets=None, stats: ClassStats | None = None):
    """Weighted sum of the active loss terms; accumulates model gradients.

    batch_src is (images, label maps); batch_tgt a list of images. The
    domain classifier is frozen here (updated separately). Pseudo-labels may
    be passed precomputed; otherwise they are built from stats when
    lambda_mi > 0. Returns (total, parts dict).
    """
    src_images, src_labels = batch_src
    model.zero_grads()

    l_seg = 0.0
    for img, lab in zip(src_images, src_labels):
        scores, tape = model.forward_scores(img, with_tape=True)
        loss, dscores = seg_loss(scores, lab)
        l_seg += loss
        model.backward(dscores / len(src_images), tape)
    l_seg /= len(src_images)

    l_da = 0.0
    if phase.lambda_da > 0 and len(batch_tgt):
        probs_s, caches_s, tapes_s = [], [], []
        for img in src_images:
            feats, tape = model.forward_features(img, with_tape=True)
            p, c = clf.forward(feats, with_cache=True)
            probs_s.append(p); caches_s.append(c); tapes_s.append(tape)
        probs_t, caches_t, tapes_t = [], [], []
        for img in batch_tgt:
            feats, tape = model.forward_features(img, with_tape=True)
            p, c = clf.forward(feats, with_cache=True)
            probs_t.append(p); caches_t.append(c); tapes_t.append(tape)
        n_units = sum(p.size for p in probs_s + probs_t)
        ld, ds1, dt1 = domain_loss(probs_s, probs_t)
        li, ds2, dt2 = inverse_domain_loss(probs_s, probs_t)
        l_d, l_dinv = ld / n_units, li / n_units
        l_da = 0.5 * (ld + li) / n_units
        scale = phase.lambda_da * 0.5 / n_units
        for dp1, dp2, cache, tape in zip(ds1 + dt1, ds2 + dt2,
                                         caches_s + caches_t, tapes_s + tapes_t):
            dfeat = clf.backward(scale * (dp1 + dp2), cache, accumulate=False)
            model.backward(dfeat, tape)

    else:
        l_d = l_dinv = float("nan")

    l_mi = 0.0
    if phase.lambda_mi > 0:
        if pseudo_targets is None:
            pseudo_targets = (make_pseudo_targets(model, batch_tgt, stats)
                              if stats is not None else [None] * len(batch_tgt))
        active = [(img, pt) for img, pt in zip(batch_tgt, pseudo_targets) if pt]
        for img, (q, w) in active:
            scores, tape = model.forward_scores(img, with_tape=True)
            loss, dscores = mil_loss(scores, q, w)
            l_mi += loss
            model.backward(phase.lambda_mi * dscores / len(active), tape)
        if active:
            l_mi /= len(active)

    total = l_seg + phase.lambda_da * l_da + phase.lambda_mi * l_mi
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite joint loss: seg={l_seg} da={l_da} mi={l_mi}")
    return total, {"l_seg": l_seg, "l_da": l_da, "l_mi": l_mi,
                   "l_d": l_d, "l_dinv": l_dinv}


# -- phase loop ------------------------------------------------------------


def evaluate_miou(model: SegModel, dataset) -> float:
    """Mean IoU of the model over (image, label) pairs."""
    cm = ConfusionMatrix(model.config.num_classes)
    for img, lab in dataset:
        cm.accumulate(predict(model.forward_scores(img)), lab)
    return iou(cm)[1]


def _update_classifier(state: TrainState, phase: PhaseConfig, src_imgs, tgt_imgs):
    """One Eq-type classifier update: minimize the classifier loss over its
    own parameters with per-unit-normalized gradients."""
    feats_s = [state.model.forward_features(i) for i in src_imgs]
    feats_t = [state.model.forward_features(i) for i in tgt_imgs]
    ld = li = 0.0
    for _ in range(phase.k_d):
        state.clf.zero_grads()
        ps, cs = zip(*(state.clf.forward(f, with_cache=True) for f in feats_s))
        pt, ct = zip(*(state.clf.forward(f, with_cache=True) for f in feats_t))
        n_units = sum(p.size for p in ps + pt)
        ld, d_s, d_t = domain_loss(list(ps), list(pt))
        li, _, _ = inverse_domain_loss(list(ps), list(pt))
        for dp, c in zip(d_s + d_t, cs + ct):
            state.clf.backward(dp / n_units, c)
        state.opt_clf.step(state.clf.params, state.clf.grads)
    n_units = sum(f.shape[1] * f.shape[2] for f in feats_s + feats_t)
    return ld / n_units, li / n_units


@dataclass
class EpochMetrics:
    phase: str
    epoch: int
    l_seg: float = float("nan")
    l_d: float = float("nan")
    l_dinv: float = float("nan")
    l_mi: float = float("nan")
    src_miou: float = float("nan")
    tgt_miou: float = float("nan")

    def row(self) -> str:
        vals = [self.phase, str(self.epoch)] + [
            f"{v:.6f}" for v in (self.l_seg, self.l_d, self.l_dinv,
                                 self.l_mi, self.src_miou, self.tgt_miou)]
        return "\t".join(vals)


LOG_HEADER = "phase\tepoch\tl_seg\tl_d\tl_dinv\tl_mi\tsrc_miou\ttgt_miou"


def run_phase(phase: str, state: TrainState, datasets: dict, cfg: TrainConfig,
              log=None, checkpoint_path=None) -> list[EpochMetrics]:
    """Run one training phase for its configured epochs.

    datasets keys: source_train [(img, lab)], source_val [(img, lab)],
    target_train [img], target_test [(img, lab)] (evaluation only).
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    pcfg = cfg.phases[phase]
    if "source_train" not in datasets or not datasets["source_train"]:
        raise ValueError("phase requires labeled source data")
    if phase in ("ga", "ga_ca") and not datasets.get("target_train"):
        raise ValueError(f"phase {phase} requires target images")
    stats = datasets.get("stats")
    if phase == "ga_ca" and stats is None:
        raise ValueError("phase ga_ca requires source class statistics")

    source = datasets["source_train"]
    target = datasets.get("target_train", [])
    phase_idx = PHASES.index(phase)
    start = state.epoch if state.phase == phase else 0
    state.phase = phase
    state.opt_model.lr = pcfg.lr_model
    state.opt_clf.lr = pcfg.lr_domain
    metrics: list[EpochMetrics] = []

    # lambda_da/lambda_mi activation by phase
    eff = PhaseConfig(**vars(pcfg))
    if phase == "source":
        eff.lambda_da = 0.0
        eff.lambda_mi = 0.0
    elif phase == "ga":
        eff.lambda_mi = 0.0

    base_lambda_da = eff.lambda_da
    for epoch in range(start, pcfg.epochs):
        # final head_epochs: freeze the feature extractor, drop alignment,
        # and let the score layer settle on the aligned representation
        head_only = phase != "source" and epoch >= pcfg.epochs - pcfg.head_epochs
        if head_only:
            state.opt_model.lr = pcfg.lr_head or pcfg.lr_model
            eff.lambda_da = 0.0
        else:
            state.opt_model.lr = pcfg.lr_model * pcfg.lr_decay ** max(0, epoch - pcfg.lr_decay_start)
            eff.lambda_da = base_lambda_da * pcfg.lambda_decay ** max(0, epoch - pcfg.lambda_decay_start)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, phase_idx, epoch]))
        order = rng.permutation(len(source))
        t_order = rng.permutation(len(target)) if len(target) else np.array([], dtype=int)

        if phase != "source" and eff.lambda_da > 0 and pcfg.domain_fit_steps:
            # refit the adversary to near-convergence on current features so
            # the representation update sees a strong opponent, not a stale one
            n_fit = min(pcfg.domain_fit_images, len(source), len(target))
            feats_s = [state.model.forward_features(source[i][0]) for i in order[:n_fit]]
            feats_t = [state.model.forward_features(target[i]) for i in t_order[:n_fit]]
            state.clf = fit_domain_classifier(
                feats_s, feats_t, hidden=state.clf.hidden,
                seed=cfg.seed + 7919 * (epoch + 1) + phase_idx,
                steps=pcfg.domain_fit_steps, lr=pcfg.domain_fit_lr,
                max_units=pcfg.domain_fit_units)
            state.opt_clf.velocity = {}

        pseudo = None
        if phase == "ga_ca":
            # pseudo-labels recomputed from the current model once per epoch
            pseudo = make_pseudo_targets(state.model, target, stats)

        m = EpochMetrics(phase, epoch + 1)
        sums = {"l_seg": 0.0, "l_da": 0.0, "l_mi": 0.0, "l_d": 0.0, "l_dinv": 0.0}
        n_batches = 0
        bs = cfg.batch_size
        for b0 in range(0, len(order), bs):
            idx = order[b0:b0 + bs]
            src_imgs = [source[i][0] for i in idx]
            src_labs = [source[i][1] for i in idx]
            tgt_imgs, tgt_pseudo = [], []
            if phase != "source" and len(target):
                t_idx = [t_order[(b0 + j) % len(target)] for j in range(len(idx))]
                tgt_imgs = [target[i] for i in t_idx]
                if pseudo is not None:
                    tgt_pseudo = [pseudo[i] for i in t_idx]

            if phase != "source" and pcfg.k_d > 0:
                ld, li = _update_classifier(state, pcfg, src_imgs, tgt_imgs)
                sums["l_d"] += ld
                sums["l_dinv"] += li

            _, parts = joint_loss(state.model, state.clf, (src_imgs, src_labs),
                                  tgt_imgs, eff,
                                  pseudo_targets=tgt_pseudo if pseudo is not None else None,
                                  stats=stats)
            params, grads = state.model.params(), state.model.grads()
            if head_only:
                keep = lambda k: k.startswith("score.")
            elif phase != "source" and pcfg.adapt_convs > 0:
                allowed = tuple(f"conv{i}." for i in range(pcfg.adapt_convs))
                keep = lambda k: k.startswith(allowed)
            else:
                keep = None
            if keep is not None:
                params = {k: v for k, v in params.items() if keep(k)}
                grads = {k: v for k, v in grads.items() if keep(k)}
            state.opt_model.step(params, grads)
            for k in ("l_seg", "l_da", "l_mi"):
                sums[k] += parts[k]
            if phase != "source" and pcfg.k_d == 0:
                # adversary is only refit per epoch; log its loss as seen by
                # the representation update
                sums["l_d"] += parts["l_d"]
                sums["l_dinv"] += parts["l_dinv"]
            n_batches += 1

        m.l_seg = sums["l_seg"] / n_batches
        m.l_mi = sums["l_mi"] / n_batches
        if phase != "source":
            m.l_d = sums["l_d"] / n_batches
            m.l_dinv = sums["l_dinv"] / n_batches
        eval_now = (epoch + 1) % max(1, pcfg.eval_every) == 0 or epoch + 1 == pcfg.epochs
        if eval_now and datasets.get("source_val"):
            m.src_miou = evaluate_miou(state.model, datasets["source_val"])
        if eval_now and datasets.get("target_test"):
            m.tgt_miou = evaluate_miou(state.model, datasets["target_test"])
        metrics.append(m)
        state.epoch = epoch + 1
        if log is not None:
            log.write(m.row() + "\n")
            log.flush()
        if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_state(checkpoint_path, state, cfg)

    if checkpoint_path:
        save_state(checkpoint_path, state, cfg)
    return metrics
