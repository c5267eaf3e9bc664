"""Toy dilated fully convolutional segmentation network.

The stack is: a configurable list of 3x3 convolutions with ReLU, strided
average pooling after the first two layers (pool strides multiply to the
downsample factor), a 1x1 scoring convolution, and corner-aligned bilinear
upsampling back to input resolution.

The model owns its parameters and gradients; forward passes return a tape
that the backward passes consume, so gradients can be driven either from the
score map (segmentation / MIL losses) or directly from the feature map
(adversarial representation updates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import IGNORE_LABEL
from .layers import AvgPool, BilinearUpsample, Conv2d, ReLU


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 32)
    dilations: tuple[int, ...] = (1, 1, 2, 4)
    pool_strides: tuple[int, ...] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        if not 3 <= len(self.widths) <= 5:
            raise ValueError("widths must list 3 to 5 hidden layers")
        if len(self.dilations) != len(self.widths):
            raise ValueError("dilations must match widths")
        if len(self.pool_strides) != 2:
            raise ValueError("exactly two pool strides (after the first two layers)")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.pool_strides))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


class SegModel:
    """Fully convolutional scorer with built-in reverse-mode gradients."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone: list = []
        in_ch = config.in_channels
        for i, (w, d) in enumerate(zip(config.widths, config.dilations)):
            self.backbone.append(Conv2d(in_ch, w, ksize=3, dilation=d, rng=rng))
            self.backbone.append(ReLU())
            if i < 2:
                self.backbone.append(AvgPool(config.pool_strides[i]))
            in_ch = w
        self.score_conv = Conv2d(in_ch, config.num_classes, ksize=1, rng=rng)
        self.upsample = BilinearUpsample(config.downsample)
        self._param_layers = [l for l in self.backbone if l.params] + [self.score_conv]

    # -- parameter access -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live references to all named parameter tensors."""
        out = {}
        conv_idx = 0
        for layer in self.backbone:
            if layer.params:
                for k, v in layer.params.items():
                    out[f"conv{conv_idx}.{k}"] = v
                conv_idx += 1
        for k, v in self.score_conv.params.items():
            out[f"score.{k}"] = v
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        conv_idx = 0
        for layer in self.backbone:
            if layer.params:
                for k, v in layer.grads.items():
                    out[f"conv{conv_idx}.{k}"] = v
                conv_idx += 1
        for k, v in self.score_conv.grads.items():
            out[f"score.{k}"] = v
        return out

    def zero_grads(self):
        for layer in self._param_layers:
            layer.zero_grads()

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward / backward ------------------------------------------------

    def _check_image(self, image: np.ndarray):
        if image.ndim != 3 or image.shape[0] != self.config.in_channels:
            raise ValueError(f"image must be ({self.config.in_channels}, H, W), got {image.shape}")
        ds = self.config.downsample
        if image.shape[1] % ds or image.shape[2] % ds:
            raise ValueError(
                f"image size {image.shape[1]}x{image.shape[2]} not divisible by "
                f"downsample factor {ds}")

    def forward_features(self, image: np.ndarray, with_tape: bool = False):
        """Pre-scoring representation, shape (D, H/ds, W/ds)."""
        self._check_image(image)
        x = np.asarray(image, dtype=float)
        tape = []
        for layer in self.backbone:
            x, cache = layer.forward(x)
            tape.append((layer, cache))
        return (x, tape) if with_tape else x

    def forward_scores(self, image: np.ndarray, with_tape: bool = False):
        """Per-pixel per-class raw scores, shape (C, H, W) at input resolution."""
        feats, tape = self.forward_features(image, with_tape=True)
        s, cache = self.score_conv.forward(feats)
        tape.append((self.score_conv, cache))
        y, cache = self.upsample.forward(s)
        tape.append((self.upsample, cache))
        return (y, tape) if with_tape else y

    def backward(self, dout: np.ndarray, tape) -> np.ndarray:
        """Run dout back through a tape, accumulating parameter gradients."""
        for layer, cache in reversed(tape):
            dout = layer.backward(dout, cache)
        return dout


def softmax(scores: np.ndarray) -> np.ndarray:
    """Channel softmax of a (C, H, W) score map."""
    z = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def predict(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax label map; ties go to the lowest class index."""
    return np.argmax(scores, axis=0)


def seg_loss(scores: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over non-ignore pixels.

    Returns (loss, dloss/dscores). All-ignore label maps give loss 0 with a
    zero gradient.
    """
    if scores.shape[1:] != labels.shape:
        raise ValueError(f"score map {scores.shape[1:]} vs label map {labels.shape}")
    valid = labels != IGNORE_LABEL
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(scores)
    num_classes = scores.shape[0]
    safe = np.where(valid, labels, 0)
    if safe.max() >= num_classes:
        raise ValueError("label index out of range")
    p = softmax(scores)
    logp = np.log(np.clip(p, 1e-30, None))
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    loss = -float(picked[valid].sum()) / n
    onehot = np.zeros_like(scores)
    np.put_along_axis(onehot, safe[None], 1.0, axis=0)
    dscores = (p - onehot) * valid[None] / n
    return loss, dscores


def checkpoint_tensors(model: SegModel) -> dict[str, np.ndarray]:
    """Model parameters under the checkpoint naming convention."""
    return {f"model/{k}": v for k, v in model.params().items()}
