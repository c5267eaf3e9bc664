"""Per-class layout statistics transferred from the labeled source domain.

For every class, over the source images that contain it, we record the lower
decile, mean, and upper decile of per-image coverage (fraction of non-ignore
pixels). Percentiles use the linear-interpolation convention (numpy's
default), with inclusive endpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import IGNORE_LABEL

STATS_SCHEMA = "segadapt-class-stats/1"


def coverage(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of non-ignore pixels assigned to each class."""
    labels = np.asarray(labels)
    valid = labels[labels != IGNORE_LABEL]
    if valid.size == 0:
        raise ValueError("coverage undefined: all pixels are ignored")
    if valid.max() >= num_classes:
        raise ValueError(f"label {valid.max()} out of range for {num_classes} classes")
    counts = np.bincount(valid.ravel(), minlength=num_classes)
    return counts / valid.size


@dataclass
class ClassStats:
    num_classes: int
    alpha: np.ndarray   # lower-decile coverage, per class
    delta: np.ndarray   # mean coverage
    gamma: np.ndarray   # upper-decile coverage
    n: np.ndarray       # number of source images containing the class
    class_names: list[str] = field(default_factory=list)

    def usable(self, c: int) -> bool:
        return self.n[c] > 0


def compute_stats(source_labels: list[np.ndarray], num_classes: int,
                  class_names: list[str] | None = None) -> ClassStats:
    """Gather per-class coverage deciles/means over images containing the class."""
    if not source_labels:
        raise ValueError("need at least one label map")
    per_class: list[list[float]] = [[] for _ in range(num_classes)]
    for lm in source_labels:
        d = coverage(lm, num_classes)
        for c in range(num_classes):
            if d[c] > 0:
                per_class[c].append(d[c])
    alpha = np.zeros(num_classes)
    delta = np.zeros(num_classes)
    gamma = np.zeros(num_classes)
    n = np.zeros(num_classes, dtype=int)
    for c, vals in enumerate(per_class):
        if vals:
            v = np.asarray(vals)
            alpha[c] = np.percentile(v, 10)
            delta[c] = v.mean()
            gamma[c] = np.percentile(v, 90)
            n[c] = len(vals)
    return ClassStats(num_classes, alpha, delta, gamma, n,
                      class_names or [str(c) for c in range(num_classes)])


def save_stats(stats: ClassStats, path):
    doc = {
        "schema": STATS_SCHEMA,
        "num_classes": stats.num_classes,
        "class_names": stats.class_names,
        "classes": {
            str(c): {
                "alpha": float(stats.alpha[c]),
                "delta": float(stats.delta[c]),
                "gamma": float(stats.gamma[c]),
                "n": int(stats.n[c]),
            }
            for c in range(stats.num_classes)
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


class StatsFormatError(ValueError):
    pass


def load_stats(path) -> ClassStats:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != STATS_SCHEMA:
        raise StatsFormatError(f"unknown stats schema {doc.get('schema')!r}")
    num_classes = int(doc["num_classes"])
    stats = ClassStats(num_classes,
                       np.zeros(num_classes), np.zeros(num_classes),
                       np.zeros(num_classes), np.zeros(num_classes, dtype=int),
                       list(doc.get("class_names", [])))
    for key, entry in doc["classes"].items():
        c = int(key)
        if not 0 <= c < num_classes:
            raise StatsFormatError(f"class id {key} out of range")
        a, d, g = float(entry["alpha"]), float(entry["delta"]), float(entry["gamma"])
        if not (0.0 <= a <= g <= 1.0):
            raise StatsFormatError(f"class {key}: invalid bounds alpha={a} gamma={g}")
        if not 0.0 <= d <= 1.0:
            raise StatsFormatError(f"class {key}: invalid mean {d}")
        stats.alpha[c], stats.delta[c], stats.gamma[c] = a, d, g
        stats.n[c] = int(entry["n"])
    return stats
