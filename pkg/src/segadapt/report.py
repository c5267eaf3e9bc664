"""Aggregation of evaluation outputs into tables and figures.

The report never recomputes metrics from checkpoints; it only reads the JSON
files written by the eval command, emits a delimited table, and renders
static matplotlib figures next to it.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

EVAL_SCHEMA = "segadapt-eval/1"


def write_eval(path, name: str, per_class, miou: float, meta: dict):
    doc = {
        "schema": EVAL_SCHEMA,
        "name": name,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "miou": float(miou),
        **meta,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_eval(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != EVAL_SCHEMA:
        raise ValueError(f"{path}: not an eval output (schema {doc.get('schema')!r})")
    return doc


def write_report(evals: list[dict], out_path) -> str:
    """Delimited per-method IoU table; returns the table text."""
    widths = {len(e["per_class_iou"]) for e in evals}
    if len(widths) != 1:
        raise ValueError(f"eval files disagree on label-space size: {sorted(widths)}")
    n = widths.pop()
    header = ["method"] + [f"class_{c}" for c in range(n)] + ["miou", "config_hash"]
    lines = ["\t".join(header)]
    for e in evals:
        cells = [e["name"]]
        cells += ["nan" if v is None else f"{v:.4f}" for v in e["per_class_iou"]]
        cells += [f"{e['miou']:.4f}", str(e.get("config_hash", ""))]
        lines.append("\t".join(cells))
    text = "\n".join(lines) + "\n"
    with open(out_path, "w") as f:
        f.write(text)
    return text


def plot_iou_bars(evals: list[dict], out_path):
    """Grouped per-class IoU bars, one group color per method."""
    n = len(evals[0]["per_class_iou"])
    x = np.arange(n)
    width = 0.8 / len(evals)
    fig, ax = plt.subplots(figsize=(max(6, n * 1.1), 4))
    for i, e in enumerate(evals):
        vals = [np.nan if v is None else v for v in e["per_class_iou"]]
        ax.bar(x + (i - (len(evals) - 1) / 2) * width, vals, width,
               label=f"{e['name']} ({e['miou']:.3f})")
    ax.set_xticks(x)
    ax.set_xticklabels([f"c{c}" for c in range(n)])
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title("Per-class IoU by method (mIoU in legend)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_loss_curves(log_path, out_path):
    """Loss curves from a training metrics log (TSV)."""
    rows = []
    with open(log_path) as f:
        header = f.readline().strip().split("\t")
        for line in f:
            rows.append(line.strip().split("\t"))
    if not rows:
        return
    cols = {name: i for i, name in enumerate(header)}
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(1, len(rows) + 1)
    for key in ("l_seg", "l_d", "l_dinv", "l_mi", "tgt_miou"):
        if key in cols:
            vals = np.array([float(r[cols[key]]) for r in rows])
            if np.isfinite(vals).any():
                ax.plot(steps, vals, label=key)
    ax.set_xlabel("epoch (cumulative)")
    ax.legend(fontsize=8)
    ax.set_title(os.path.basename(str(log_path)))
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
