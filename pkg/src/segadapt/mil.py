"""Constrained multiple-instance adaptation on unlabeled target images.

Pipeline per target image: infer which classes are present from the current
prediction and the source layout statistics, turn their coverage deciles into
per-image bounds (soft lower at the source mean, hard upper at the upper
decile; absent classes capped near zero), project the model's softmax output
onto the constraint set in KL divergence, and train against the projected
distribution with per-class gradient re-weighting.

The projection minimizes KL(Q || P) over per-pixel distributions subject to
linear coverage bounds. It is solved in the dual: one multiplier per
constrained class, with Q proportional to P * exp(multiplier) per pixel.
Multipliers for soft lower bounds are capped (hinge penalty), hard upper
bounds are enforced exactly. Each multiplier is updated by exact coordinate
ascent (root finding on its coverage), swept until the hard bounds are met.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .model import softmax
from .stats import ClassStats, coverage

PRESENCE_FLOOR = 5e-4     # absolute coverage floor when the source lower decile is 0
LOWER_PENALTY_CAP = 10.0  # hinge coefficient bounding soft lower-bound multipliers
HARD_TOL = 1e-6
MAX_SWEEPS = 500
PROB_FLOOR = 1e-7


class ProjectionInfeasibleError(ValueError):
    pass


def infer_image_labels(pred: np.ndarray, stats: ClassStats) -> set[int]:
    """Classes whose predicted coverage exceeds a tenth of the source lower decile.

    Classes with no usable source statistics are never included; when the
    source lower decile is zero the threshold falls back to a small absolute
    coverage floor.
    """
    d = coverage(pred, stats.num_classes)
    present = set()
    for c in range(stats.num_classes):
        if not stats.usable(c):
            continue
        thr = 0.1 * stats.alpha[c] if stats.alpha[c] > 0 else PRESENCE_FLOOR
        if d[c] > thr:
            present.add(c)
    return present


@dataclass
class ConstraintSet:
    """Coverage bounds per class: soft lower (slack-penalized), hard upper."""

    lower: dict[int, float] = field(default_factory=dict)
    upper: dict[int, float] = field(default_factory=dict)

    def empty(self) -> bool:
        return not self.lower and not self.upper


def build_constraints(present: set[int], stats: ClassStats) -> ConstraintSet:
    """Bounds for one image: present classes get [delta_c, gamma_c], absent
    classes with a positive lower decile get a hard cap at a tenth of it.

    If the soft lower bounds of the present classes sum past 1 they are
    scaled down proportionally to restore feasibility.
    """
    if not present:
        raise ValueError("empty image-label set: no constraints to build")
    cons = ConstraintSet()
    for c in sorted(present):
        if not stats.usable(c):
            raise ValueError(f"class {c} has no usable source statistics")
        cons.lower[c] = float(stats.delta[c])
        cons.upper[c] = float(stats.gamma[c])
    total_lower = sum(cons.lower.values())
    if total_lower > 1.0:
        scale = 1.0 / total_lower
        cons.lower = {c: v * scale for c, v in cons.lower.items()}
    for c in range(stats.num_classes):
        if c not in present and stats.usable(c) and stats.alpha[c] > 0:
            cons.upper[c] = float(0.1 * stats.alpha[c])
    return cons


def kl_divergence(q: np.ndarray, p: np.ndarray) -> float:
    q = np.clip(q, 1e-300, None)
    p = np.clip(p, 1e-300, None)
    return float(np.sum(q * (np.log(q) - np.log(p))))


def _tilt(p: np.ndarray, lam: np.ndarray) -> np.ndarray:
    w = p * np.exp(lam)[:, None]
    return w / w.sum(axis=0, keepdims=True)


@dataclass
class ProjectionInfo:
    multipliers: dict[int, float]
    sweeps: int
    max_hard_violation: float
    kl: float


def project_to_constraints(probs: np.ndarray, cons: ConstraintSet,
                           return_info: bool = False):
    """KL-project a (C, H, W) softmax map onto the coverage constraint set."""
    num_classes = probs.shape[0]
    shape = probs.shape
    p = np.clip(probs.reshape(num_classes, -1), PROB_FLOOR, None)
    p = p / p.sum(axis=0, keepdims=True)
    if cons.empty():
        q = p.reshape(shape)
        if return_info:
            return q, ProjectionInfo({}, 0, 0.0, 0.0)
        return q

    if len(cons.upper) == num_classes and sum(cons.upper.values()) < 1.0 - 1e-12:
        raise ProjectionInfeasibleError(
            f"hard upper bounds sum to {sum(cons.upper.values()):.4f} < 1; "
            f"violated: {sorted(cons.upper)}")

    lam = np.zeros(num_classes)
    classes = sorted(set(cons.lower) | set(cons.upper))

    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        moved = 0.0
        for c in classes:
            # coverage of class c as a function of its own multiplier with the
            # others held fixed; the non-c mass per pixel is constant, so each
            # evaluation is a single vector op instead of a full re-tilt
            w = p * np.exp(lam)[:, None]
            rest = w.sum(axis=0) - w[c]
            pc = p[c]

            def cov(lam_c: float) -> float:
                wc = pc * np.exp(lam_c)
                return float((wc / (rest + wc)).mean())

            s0 = cov(0.0)
            lo = cons.lower.get(c)
            up = cons.upper.get(c)
            new = 0.0
            if up is not None and s0 > up:
                if cov(-80.0) > up:
                    raise ProjectionInfeasibleError(
                        f"cannot satisfy hard upper bound {up:.6f} on class {c}")
                new = brentq(lambda l: cov(l) - up, -80.0, 0.0,
                             xtol=1e-12, rtol=8.9e-16)
            elif lo is not None and s0 < lo:
                if cov(LOWER_PENALTY_CAP) < lo:
                    new = LOWER_PENALTY_CAP   # penalty slack active
                else:
                    new = brentq(lambda l: cov(l) - lo, 0.0,
                                 LOWER_PENALTY_CAP, xtol=1e-12, rtol=8.9e-16)
            moved = max(moved, abs(new - lam[c]))
            lam[c] = new
        q = _tilt(p, lam)
        cov_all = q.mean(axis=1)
        hard_viol = max((cov_all[c] - up for c, up in cons.upper.items()), default=0.0)
        if hard_viol < HARD_TOL and moved < 1e-8:
            break

    q = _tilt(p, lam)
    cov = q.mean(axis=1)
    hard_viol = max((max(0.0, cov[c] - up) for c, up in cons.upper.items()),
                    default=0.0)
    if hard_viol >= HARD_TOL:
        bad = [c for c, up in cons.upper.items() if cov[c] - up >= HARD_TOL]
        raise ProjectionInfeasibleError(
            f"projection did not meet hard upper bounds on classes {bad}")
    qmap = q.reshape(shape)
    if return_info:
        info = ProjectionInfo({c: float(lam[c]) for c in classes}, sweeps,
                              float(hard_viol), kl_divergence(q, p))
        return qmap, info
    return qmap


def class_weights(stats: ClassStats) -> np.ndarray:
    """Down-weight classes whose source lower-decile coverage exceeds 0.1."""
    return np.where(stats.alpha > 0.1, 0.1, 1.0)


def mil_loss(scores: np.ndarray, q: np.ndarray, weights: np.ndarray):
    """Per-pixel weighted cross-entropy against the projected distribution.

    The pixel weight is the class weight of the pixel's dominant class in q.
    Returns (loss, dloss/dscores), averaged over pixels.
    """
    if scores.shape != q.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs q {q.shape}")
    n = scores.shape[1] * scores.shape[2]
    p = softmax(scores)
    logp = np.log(np.clip(p, 1e-30, None))
    w_pix = weights[np.argmax(q, axis=0)]
    loss = float(-(w_pix * (q * logp).sum(axis=0)).sum()) / n
    dscores = w_pix[None] * (p - q) / n
    return loss, dscores


def dump_debug(path, present: set[int], cons: ConstraintSet, info: ProjectionInfo):
    """Per-image projection trace for the CLI debug flag."""
    doc = {
        "present": sorted(present),
        "lower": {str(c): v for c, v in cons.lower.items()},
        "upper": {str(c): v for c, v in cons.upper.items()},
        "multipliers": {str(c): v for c, v in info.multipliers.items()},
        "sweeps": info.sweeps,
        "max_hard_violation": info.max_hard_violation,
        "kl": info.kl,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
