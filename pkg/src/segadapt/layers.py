"""Network layers with explicit forward/backward rules.

Every layer works on a single image laid out channel-first, shape (C, H, W),
in float64. forward() returns (output, cache); backward(dout, cache) returns
the input gradient and accumulates parameter gradients into the layer's
``grads`` dict. Each backward rule is checked against finite differences in
the test suite.
"""

from __future__ import annotations

import numpy as np


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Seeded uniform init in [-s, s] with s = fan_in ** -0.5."""
    s = float(fan_in) ** -0.5
    return rng.uniform(-s, s, size=shape)


class Layer:
    """Base class: parameterless layers leave params/grads empty."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Conv2d(Layer):
    """KxK convolution with dilation and same-padding, stride 1.

    Weight shape (out_ch, in_ch, k, k); padding d*(k-1)//2 keeps the spatial
    size. Implemented by gathering the k*k dilated taps into a column matrix.
    """

    def __init__(self, in_ch: int, out_ch: int, ksize: int = 3, dilation: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if ksize % 2 != 1:
            raise ValueError("only odd kernel sizes are supported")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.dilation = dilation
        self.pad = dilation * (ksize - 1) // 2
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        self.params["weight"] = init_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in)
        self.params["bias"] = np.zeros(out_ch)
        self.zero_grads()

    def _gather(self, xp: np.ndarray, height: int, width: int) -> np.ndarray:
        # xp is the padded input; returns (in_ch*k*k, H*W)
        k, d = self.ksize, self.dilation
        c = xp.shape[0]
        cols = np.empty((c, k, k, height, width), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, i * d:i * d + height, j * d:j * d + width]
        return cols.reshape(c * k * k, height * width)

    def forward(self, x):
        if x.shape[0] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[0]}")
        _, height, width = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        cols = self._gather(xp, height, width)
        w = self.params["weight"].reshape(self.out_ch, -1)
        y = (w @ cols + self.params["bias"][:, None]).reshape(self.out_ch, height, width)
        return y, (cols, x.shape)

    def backward(self, dout, cache):
        cols, x_shape = cache
        _, height, width = x_shape
        k, d, p = self.ksize, self.dilation, self.pad
        dy = dout.reshape(self.out_ch, -1)
        self.grads["weight"] += (dy @ cols.T).reshape(self.params["weight"].shape)
        self.grads["bias"] += dy.sum(axis=1)
        w = self.params["weight"].reshape(self.out_ch, -1)
        dcols = (w.T @ dy).reshape(self.in_ch, k, k, height, width)
        dxp = np.zeros((self.in_ch, height + 2 * p, width + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, i * d:i * d + height, j * d:j * d + width] += dcols[:, i, j]
        return dxp[:, p:p + height, p:p + width] if p else dxp


class ReLU(Layer):
    def forward(self, x):
        y = np.maximum(x, 0.0)
        return y, (x > 0)

    def backward(self, dout, cache):
        return dout * cache


class AvgPool(Layer):
    """Non-overlapping average pooling with window == stride."""

    def __init__(self, stride: int):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride

    def forward(self, x):
        s = self.stride
        c, height, width = x.shape
        if height % s or width % s:
            raise ValueError(f"spatial size {height}x{width} not divisible by pool stride {s}")
        y = x.reshape(c, height // s, s, width // s, s).mean(axis=(2, 4))
        return y, x.shape

    def backward(self, dout, cache):
        s = self.stride
        c, height, width = cache
        dx = np.repeat(np.repeat(dout, s, axis=1), s, axis=2) / (s * s)
        return dx.reshape(c, height, width)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic corner-aligned linear interpolation matrix (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


class BilinearUpsample(Layer):
    """Channel-separable corner-aligned bilinear upsampling by an integer factor."""

    def __init__(self, factor: int):
        super().__init__()
        if factor < 1:
            raise ValueError("upsample factor must be >= 1")
        self.factor = factor
        self._mats: dict[tuple[int, int], np.ndarray] = {}

    def _mat(self, n_in: int) -> np.ndarray:
        key = (n_in, n_in * self.factor)
        if key not in self._mats:
            self._mats[key] = _interp_matrix(key[1], n_in)
        return self._mats[key]

    def forward(self, x):
        if self.factor == 1:
            return x, x.shape
        _, height, width = x.shape
        mr, mc = self._mat(height), self._mat(width)
        y = np.einsum("oh,chw,pw->cop", mr, x, mc, optimize=True)
        return y, x.shape

    def backward(self, dout, cache):
        if self.factor == 1:
            return dout
        _, height, width = cache
        mr, mc = self._mat(height), self._mat(width)
        return np.einsum("oh,cop,pw->chw", mr, dout, mc, optimize=True)


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Functional corner-aligned bilinear upsampling of a (C, H, W) map."""
    y, _ = BilinearUpsample(factor).forward(np.asarray(x, dtype=float))
    return y
