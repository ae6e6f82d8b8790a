"""Minimal conv / batch-norm / GeLU layers with analytic backward passes, and Adam.

Activations are batch-last ``(C, H, W, N)``. Each layer caches what its
backward pass needs during ``forward`` and writes parameter gradients to
``self.grads``. Shapes passed to ``output_shape`` are ``(C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from ._conv import correlate, correlate_adjoint, correlate_wgrad

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "tconv", "batch_norm" or "gelu"
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    filters: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "tconv", "batch_norm", "gelu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.stride) < 1:
            raise ValueError("strides must be >= 1")
        if self.filters < 1:
            raise ValueError("filters must be >= 1")

    def to_dict(self):
        return {"kind": self.kind, "kernel": list(self.kernel), "stride": list(self.stride), "filters": self.filters}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["kernel"]), tuple(d["stride"]), int(d["filters"]))


class Layer:
    spec: LayerSpec

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def output_shape(self, in_shape):
        return in_shape


class Conv2D(Layer):
    """Valid (unpadded) strided cross-correlation."""

    def __init__(self, spec, in_channels, rng):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        bound = np.sqrt(3.0 / (in_channels * kh * kw))
        self.params["W"] = rng.uniform(-bound, bound, (spec.filters, in_channels, kh, kw))
        self.params["b"] = np.zeros(spec.filters)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.spec.kernel
        sh, sw = self.spec.stride
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return (self.spec.filters, ho, wo)

    def forward(self, x, training=False):
        self._x = x
        return correlate(x, self.params["W"], self.spec.stride) + self.params["b"][:, None, None, None]

    def backward(self, dout):
        x = self._x
        self.grads["W"] = correlate_wgrad(x, dout, self.spec.kernel, self.spec.stride)
        self.grads["b"] = dout.sum(axis=(1, 2, 3))
        return correlate_adjoint(dout, self.params["W"], x.shape[1:3], self.spec.stride)


class ConvTranspose2D(Layer):
    """Adjoint of ``Conv2D`` with the same kernel/stride; inverts its output size."""

    def __init__(self, spec, in_channels, rng):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        bound = np.sqrt(3.0 / (in_channels * kh * kw))
        self.params["W"] = rng.uniform(-bound, bound, (in_channels, spec.filters, kh, kw))
        self.params["b"] = np.zeros(spec.filters)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.spec.kernel
        sh, sw = self.spec.stride
        return (self.spec.filters, (h - 1) * sh + kh, (w - 1) * sw + kw)

    def forward(self, x, training=False):
        self._x = x
        _, ho, wo = self.output_shape(x.shape[:3])
        out = correlate_adjoint(x, self.params["W"], (ho, wo), self.spec.stride)
        return out + self.params["b"][:, None, None, None]

    def backward(self, dout):
        x = self._x
        self.grads["W"] = correlate_wgrad(dout, x, self.spec.kernel, self.spec.stride)
        self.grads["b"] = dout.sum(axis=(1, 2, 3))
        return correlate(dout, self.params["W"], self.spec.stride)


class GELU(Layer):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def forward(self, x, training=False):
        self._x = x
        self._cdf = ndtr(x)
        return x * self._cdf

    def backward(self, dout):
        x = self._x
        return dout * (self._cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


class BatchNorm(Layer):
    """Per-channel batch normalization; running statistics by EMA."""

    eps = 1e-7
    momentum = 0.9

    def __init__(self, spec, channels):
        super().__init__()
        self.spec = spec
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, training=False):
        g = self.params["gamma"][:, None, None, None]
        b = self.params["beta"][:, None, None, None]
        if not training:
            mu = self.buffers["running_mean"][:, None, None, None]
            var = self.buffers["running_var"][:, None, None, None]
            return g * (x - mu) / np.sqrt(var + self.eps) + b
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[:, None, None, None]) * inv_std[:, None, None, None]
        self._cache = (xhat, inv_std)
        self._batch_stats = (mu, var)
        return g * xhat + b

    def update_running(self):
        mu, var = self._batch_stats
        m = self.momentum
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var

    def backward(self, dout):
        xhat, inv_std = self._cache
        self.grads["gamma"] = (dout * xhat).sum(axis=(1, 2, 3))
        self.grads["beta"] = dout.sum(axis=(1, 2, 3))
        dxhat = dout * self.params["gamma"][:, None, None, None]
        m = dout[0].size
        s1 = dxhat.sum(axis=(1, 2, 3))[:, None, None, None]
        s2 = (dxhat * xhat).sum(axis=(1, 2, 3))[:, None, None, None]
        return inv_std[:, None, None, None] * (dxhat - s1 / m - xhat * s2 / m)


def build_layer(spec: LayerSpec, in_shape, rng):
    if spec.kind == "conv":
        return Conv2D(spec, in_shape[0], rng)
    if spec.kind == "tconv":
        return ConvTranspose2D(spec, in_shape[0], rng)
    if spec.kind == "batch_norm":
        return BatchNorm(spec, in_shape[0])
    return GELU(spec)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, weights: dict, grads: dict):
    """One bias-corrected Adam update, in place. Returns ``(weights, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if g.shape != weights[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match weight {name} {weights[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        weights[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return weights, state
