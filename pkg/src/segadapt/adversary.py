"""Per-unit domain classifier and adversarial alignment losses.

Each spatial unit of the feature map is one binary classification instance
(source vs target). The classifier is two 1x1 convolutions with a single
logistic output. The classifier loss sums -log p over source units and
-log(1-p) over target units; the inverse loss swaps the labels. Alternating
minimization trains the classifier on the first and the representation on
the average of the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .layers import init_uniform
from .optim import SGD

PROB_EPS = 1e-7


class DomainClassifier:
    """Two-layer per-unit MLP applied convolutionally (1x1 receptive field)."""

    def __init__(self, in_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.hidden = hidden
        self.params = {
            "w1": init_uniform(rng, (hidden, in_dim), in_dim),
            "b1": np.zeros(hidden),
            "w2": init_uniform(rng, (1, hidden), hidden),
            "b2": np.zeros(1),
        }
        self.zero_grads()

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, features: np.ndarray, with_cache: bool = False):
        """Per-unit source probability map, shape (H, W), clamped to (eps, 1-eps)."""
        if features.shape[0] != self.in_dim:
            raise ValueError(f"classifier expects {self.in_dim} channels, got {features.shape[0]}")
        d, height, width = features.shape
        x = features.reshape(d, -1).T                      # (N, D)
        h_pre = x @ self.params["w1"].T + self.params["b1"]
        h = np.maximum(h_pre, 0.0)
        z = (h @ self.params["w2"].T + self.params["b2"])[:, 0]
        p_raw = expit(z)
        p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
        pmap = p.reshape(height, width)
        if not with_cache:
            return pmap
        return pmap, (x, h_pre, h, p_raw, features.shape)

    def backward(self, dprob: np.ndarray, cache, accumulate: bool = True):
        """Backprop dL/dp through the classifier.

        Accumulates classifier parameter gradients (unless accumulate=False)
        and returns dL/dfeatures for representation updates. Units whose
        probability hit the clamp get zero gradient, matching the clamped
        loss exactly.
        """
        x, h_pre, h, p_raw, fshape = cache
        clipped = (p_raw <= PROB_EPS) | (p_raw >= 1.0 - PROB_EPS)
        dz = dprob.reshape(-1) * p_raw * (1.0 - p_raw)
        dz[clipped] = 0.0
        dh = dz[:, None] @ self.params["w2"]
        dh_pre = dh * (h_pre > 0)
        if accumulate:
            self.grads["w2"] += dz[None, :] @ h
            self.grads["b2"] += np.array([dz.sum()])
            self.grads["w1"] += dh_pre.T @ x
            self.grads["b1"] += dh_pre.sum(axis=0)
        dx = dh_pre @ self.params["w1"]
        return dx.T.reshape(fshape)


def domain_loss(p_src: list[np.ndarray], p_tgt: list[np.ndarray]):
    """Classifier loss: -sum log p over source units, -sum log(1-p) over target.

    Returns (loss, dloss/dp per source map, dloss/dp per target map).
    """
    if not p_src or not p_tgt:
        raise ValueError("need at least one probability map per domain")
    loss = 0.0
    d_src, d_tgt = [], []
    for p in p_src:
        loss -= float(np.log(p).sum())
        d_src.append(-1.0 / p)
    for p in p_tgt:
        loss -= float(np.log1p(-p).sum())
        d_tgt.append(1.0 / (1.0 - p))
    return loss, d_src, d_tgt


def inverse_domain_loss(p_src: list[np.ndarray], p_tgt: list[np.ndarray]):
    """Label-swapped loss: -sum log(1-p) over source, -sum log p over target."""
    loss, d_tgt, d_src = domain_loss(p_tgt, p_src)
    return loss, d_src, d_tgt


@dataclass
class StepConfig:
    k_d: int = 1
    k_r: int = 1
    lr_classifier: float = 1e-3
    lr_representation: float = 1e-4
    momentum: float = 0.9


@dataclass
class StepDiagnostics:
    loss_d_before: float
    loss_d_after: float
    loss_inv_before: float
    loss_inv_after: float


def _forward_batch(model, clf, images, with_tapes):
    probs, caches, tapes = [], [], []
    for img in images:
        feats, tape = model.forward_features(img, with_tape=True)
        p, cache = clf.forward(feats, with_cache=True)
        probs.append(p)
        caches.append(cache)
        tapes.append(tape if with_tapes else None)
    return probs, caches, tapes


def adversarial_step(model, clf: DomainClassifier, batch_src, batch_tgt,
                     schedule: StepConfig,
                     opt_clf: SGD | None = None,
                     opt_model: SGD | None = None) -> StepDiagnostics:
    """One round of alternating minimization.

    First k_d classifier updates minimize the classifier loss over the
    classifier parameters (representation frozen), then k_r representation
    updates minimize the average of the classifier and inverse losses over
    the model parameters (classifier frozen).
    """
    if not len(batch_src) or not len(batch_tgt):
        raise ValueError("both batches must be non-empty")
    opt_clf = opt_clf or SGD(schedule.lr_classifier, schedule.momentum)
    opt_model = opt_model or SGD(schedule.lr_representation, schedule.momentum)

    def losses():
        p_s, _, _ = _forward_batch(model, clf, batch_src, False)
        p_t, _, _ = _forward_batch(model, clf, batch_tgt, False)
        ld, _, _ = domain_loss(p_s, p_t)
        li, _, _ = inverse_domain_loss(p_s, p_t)
        return ld, li

    ld0, li0 = losses()

    # classifier updates (representation frozen)
    for _ in range(schedule.k_d):
        clf.zero_grads()
        p_s, c_s, _ = _forward_batch(model, clf, batch_src, False)
        p_t, c_t, _ = _forward_batch(model, clf, batch_tgt, False)
        ld, d_s, d_t = domain_loss(p_s, p_t)
        if not np.isfinite(ld):
            raise FloatingPointError(f"non-finite classifier loss {ld}; probs min/max: "
                                     f"{min(p.min() for p in p_s + p_t)}/"
                                     f"{max(p.max() for p in p_s + p_t)}")
        for dp, cache in zip(d_s + d_t, c_s + c_t):
            clf.backward(dp, cache)
        opt_clf.step(clf.params, clf.grads)

    # representation updates (classifier frozen)
    for _ in range(schedule.k_r):
        model.zero_grads()
        p_s, c_s, t_s = _forward_batch(model, clf, batch_src, True)
        p_t, c_t, t_t = _forward_batch(model, clf, batch_tgt, True)
        ld, ds1, dt1 = domain_loss(p_s, p_t)
        li, ds2, dt2 = inverse_domain_loss(p_s, p_t)
        obj = 0.5 * (ld + li)
        if not np.isfinite(obj):
            raise FloatingPointError(f"non-finite representation objective {obj}")
        for dp1, dp2, cache, tape in zip(ds1 + dt1, ds2 + dt2, c_s + c_t, t_s + t_t):
            dfeat = clf.backward(0.5 * (dp1 + dp2), cache, accumulate=False)
            model.backward(dfeat, tape)
        opt_model.step(model.params(), model.grads())

    ld1, li1 = losses()
    return StepDiagnostics(ld0, ld1, li0, li1)


def unit_accuracy(clf: DomainClassifier, feats_src, feats_tgt) -> float:
    """Fraction of units classified correctly at threshold 0.5."""
    correct = total = 0
    for f in feats_src:
        p = clf.forward(f)
        correct += int((p > 0.5).sum())
        total += p.size
    for f in feats_tgt:
        p = clf.forward(f)
        correct += int((p <= 0.5).sum())
        total += p.size
    return correct / total


def fit_domain_classifier(feats_src, feats_tgt, hidden: int = 64, seed: int = 0,
                          steps: int = 800, lr: float = 0.5,
                          max_units: int = 0) -> DomainClassifier:
    """Train a fresh domain classifier to near-convergence on frozen features.

    Training runs on per-channel standardized features (full-batch gradient
    steps on the per-unit classifier loss); the standardizing affine map is
    then folded into the first layer, so the returned classifier operates on
    raw features. With max_units > 0, each domain's unit set is subsampled
    to at most that many units (seeded), which bounds the cost of a fit on
    large feature collections.
    """
    stacked = np.concatenate([f.reshape(f.shape[0], -1) for f in feats_src + feats_tgt],
                             axis=1)
    mu = stacked.mean(axis=1)
    sd = stacked.std(axis=1) + 1e-8

    # The classifier is per-unit, so all units of a domain can be fused into a
    # single 1-row map; full-batch steps then cost two forwards instead of one
    # per image.
    sub = np.random.default_rng(seed)

    def fuse(feats):
        units = np.concatenate([f.reshape(f.shape[0], -1) for f in feats], axis=1)
        if max_units and units.shape[1] > max_units:
            units = units[:, sub.choice(units.shape[1], max_units, replace=False)]
        return ((units - mu[:, None]) / sd[:, None])[:, None, :]

    tr_s, tr_t = fuse(feats_src), fuse(feats_tgt)

    clf = DomainClassifier(tr_s.shape[0], hidden=hidden, seed=seed)
    n_units = tr_s.shape[2] + tr_t.shape[2]
    opt = SGD(lr)
    for _ in range(steps):
        clf.zero_grads()
        p_s, c_s = clf.forward(tr_s, with_cache=True)
        p_t, c_t = clf.forward(tr_t, with_cache=True)
        _, d_s, d_t = domain_loss([p_s], [p_t])
        clf.backward(d_s[0] / n_units, c_s)
        clf.backward(d_t[0] / n_units, c_t)
        opt.step(clf.params, clf.grads)

    # fold standardization into the first layer: w1 (x-mu)/sd + b1
    w1 = clf.params["w1"]
    clf.params["b1"] = clf.params["b1"] - w1 @ (mu / sd)
    clf.params["w1"] = w1 / sd[None, :]
    return clf


def train_probe(feats_src, feats_tgt, hidden: int = 64, seed: int = 0,
                steps: int = 800, lr: float = 0.5,
                holdout_frac: float = 0.25) -> tuple[DomainClassifier, float]:
    """Fit a fresh probe classifier on frozen features and score it on a
    held-out trailing fraction of each side (unit-level accuracy)."""
    n_s = max(1, int(len(feats_src) * (1 - holdout_frac)))
    n_t = max(1, int(len(feats_tgt) * (1 - holdout_frac)))
    tr_s, ho_s = feats_src[:n_s], feats_src[n_s:] or feats_src[:1]
    tr_t, ho_t = feats_tgt[:n_t], feats_tgt[n_t:] or feats_tgt[:1]
    probe = fit_domain_classifier(tr_s, tr_t, hidden=hidden, seed=seed,
                                  steps=steps, lr=lr)
    return probe, unit_accuracy(probe, ho_s, ho_t)
