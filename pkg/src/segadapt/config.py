"""Declarative run configuration: INI-style key-value text.

Sections: [model], [data], [train], and one per phase ([source], [ga],
[ga_ca]). A config file plus its seed fully determines a run; the config
hash stored in checkpoints and manifests is the SHA-256 of the parsed,
canonicalized key-value content.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field

from .model import ModelConfig


@dataclass
class PhaseConfig:
    epochs: int = 0
    lr_model: float = 1e-3
    lr_domain: float = 1e-3
    k_d: int = 1
    k_r: int = 1
    lambda_da: float = 1.0
    lambda_mi: float = 0.1
    domain_hidden: int = 64
    # epoch-level classifier refit (0 disables): full-batch steps on a
    # sample of frozen features, so the adversary stays near its optimum
    domain_fit_steps: int = 300
    domain_fit_lr: float = 0.5
    domain_fit_images: int = 24
    domain_fit_units: int = 2048
    # per-epoch multiplicative decay on lr_model (1.0 = constant), applied
    # from epoch lr_decay_start onwards: settle after recovery, not during
    lr_decay: float = 1.0
    lr_decay_start: int = 0
    # per-epoch multiplicative decay on lambda_da (1.0 = constant), applied
    # from epoch lambda_decay_start onwards: align first, then let the
    # segmentation objective consolidate on the aligned features
    lambda_decay: float = 1.0
    lambda_decay_start: int = 0
    # mIoU evaluation cadence in epochs (always evaluated on the last epoch)
    eval_every: int = 1
    # final epochs that recalibrate only the score head: the feature
    # extractor is frozen and alignment is switched off, so the shared
    # representation keeps its aligned geometry while the linear decision
    # layer settles on labeled data
    head_epochs: int = 0
    lr_head: float = 0.0  # lr for head-only epochs; 0 means reuse lr_model
    # restrict representation updates to the first N backbone convs
    # (0 = all layers train): low-level shifts such as recoloring are
    # absorbed early, keeping deeper semantics and the head intact
    adapt_convs: int = 0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    batch_size: int = 8
    checkpoint_every: int = 0       # epochs; 0 = only at phase end
    momentum: float = 0.9
    source_train: str = "data/source_train/manifest.json"
    source_val: str = "data/source_val/manifest.json"
    target_train: str = "data/target_train/manifest.json"
    target_test: str = "data/target_test/manifest.json"
    stats_path: str = "stats.json"
    phases: dict[str, PhaseConfig] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def load_train_config(path) -> TrainConfig:
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)

    m = cp["model"] if cp.has_section("model") else {}
    model = ModelConfig(
        num_classes=int(m.get("classes", 6)),
        in_channels=int(m.get("in_channels", 3)),
        widths=_ints(m.get("widths", "16,32,32,32")),
        dilations=_ints(m.get("dilations", "1,1,2,4")),
        pool_strides=_ints(m.get("pool_strides", "2,4")),
        seed=int(m.get("seed", 0)),
    )

    t = cp["train"] if cp.has_section("train") else {}
    d = cp["data"] if cp.has_section("data") else {}
    cfg = TrainConfig(
        model=model,
        seed=int(t.get("seed", 0)),
        batch_size=int(t.get("batch_size", 8)),
        checkpoint_every=int(t.get("checkpoint_every", 0)),
        momentum=float(t.get("momentum", 0.9)),
        source_train=d.get("source_train", TrainConfig.source_train),
        source_val=d.get("source_val", TrainConfig.source_val),
        target_train=d.get("target_train", TrainConfig.target_train),
        target_test=d.get("target_test", TrainConfig.target_test),
        stats_path=d.get("stats", TrainConfig.stats_path),
    )
    for phase in ("source", "ga", "ga_ca"):
        p = cp[phase] if cp.has_section(phase) else {}
        cfg.phases[phase] = PhaseConfig(
            epochs=int(p.get("epochs", 0)),
            lr_model=float(p.get("lr_model", 1e-3)),
            lr_domain=float(p.get("lr_domain", 1e-3)),
            k_d=int(p.get("k_d", 1)),
            k_r=int(p.get("k_r", 1)),
            lambda_da=float(p.get("lambda_da", 1.0)),
            lambda_mi=float(p.get("lambda_mi", 0.1)),
            domain_hidden=int(p.get("domain_hidden", 64)),
            domain_fit_steps=int(p.get("domain_fit_steps", 300)),
            domain_fit_lr=float(p.get("domain_fit_lr", 0.5)),
            domain_fit_images=int(p.get("domain_fit_images", 24)),
            domain_fit_units=int(p.get("domain_fit_units", 2048)),
            lr_decay=float(p.get("lr_decay", 1.0)),
            lr_decay_start=int(p.get("lr_decay_start", 0)),
            lambda_decay=float(p.get("lambda_decay", 1.0)),
            lambda_decay_start=int(p.get("lambda_decay_start", 0)),
            eval_every=int(p.get("eval_every", 1)),
            head_epochs=int(p.get("head_epochs", 0)),
            lr_head=float(p.get("lr_head", 0.0)),
            adapt_convs=int(p.get("adapt_convs", 0)),
        )
    cfg.raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return cfg
