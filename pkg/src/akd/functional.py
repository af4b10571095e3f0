"""Neural-network kernels built on :mod:`akd.tensor`.

Each kernel computes its forward in numpy and registers a hand-written
backward.  Softmax and normalisation statistics are accumulated in float64
and cast back to the input dtype.
"""

from __future__ import annotations

import numpy as np

from akd.errors import DimensionError, EmptyAttentionError
from akd.tensor import Tensor, _as_tensor, _make, add, matmul

__all__ = [
    "relu",
    "sigmoid",
    "swish",
    "glu",
    "layer_norm",
    "linear",
    "pointwise_conv1d",
    "depthwise_conv1d",
    "masked_softmax",
    "softmax",
    "mean_square",
]


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)

    def bw(g):
        return (g * (s + xd * s * (1 - s)),)

    return _make(xd * s, (x,), bw, "swish")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid(second half)."""
    if x.shape[-1] % 2:
        raise DimensionError(f"glu needs an even last dimension, got {x.shape[-1]}")
    a, b = np.split(x.data, 2, axis=-1)
    s = _sigmoid_np(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return _make(a * s, (x,), bw, "glu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an elementwise affine map."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(f"layer_norm affine shape must be ({h},)")
    dt = x.dtype
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dgamma = (g * xhat).sum(axis=lead, dtype=np.float64).astype(dt)
        dbeta = g.sum(axis=lead, dtype=np.float64).astype(dt)
        dxhat = g * gd
        s1 = dxhat.sum(-1, keepdims=True, dtype=np.float64).astype(dt)
        s2 = (dxhat * xhat).sum(-1, keepdims=True, dtype=np.float64).astype(dt)
        dx = (inv / h) * (h * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def pointwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-size-1 convolution over (B, T, C_in) with weight (C_in, C_out)."""
    return linear(x, weight, bias)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution over time with symmetric zero padding.

    x is (B, T, C), weight is (K, C) with K odd; output length equals T.
    """
    if x.ndim != 3:
        raise DimensionError(f"depthwise_conv1d expects (B, T, C), got {x.shape}")
    k, c = weight.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if c != x.shape[2]:
        raise DimensionError(f"channel mismatch: input {x.shape[2]}, kernel {c}")
    pad = (k - 1) // 2
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    w = weight.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + t, :] * w[j]
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp, dtype=g.dtype)
        gw = np.empty((k, c), dtype=g.dtype)
        for j in range(k):
            gxp[:, j : j + t, :] += g * w[j]
            gw[j] = (g * xp[:, j : j + t, :]).sum(axis=(0, 1))
        gx = gxp[:, pad : pad + t, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return _make(out, parents, bw, "depthwise_conv1d")


def masked_softmax(scores: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to positions where ``mask`` is true.

    ``mask`` must broadcast against ``scores``; masked positions come out as
    exact zeros.  A row with every position masked raises
    :class:`EmptyAttentionError`.
    """
    scores = _as_tensor(scores)
    dt = scores.dtype
    s = scores.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim < s.ndim:
            m = m.reshape((1,) * (s.ndim - m.ndim) + m.shape)
        if m.shape[axis] == s.shape[axis]:
            rows_ok = m.any(axis=axis)
        else:
            rows_ok = np.broadcast_to(m, s.shape).any(axis=axis)
        if not rows_ok.all():
            raise EmptyAttentionError("softmax row with every position masked")
        if not m.all():
            # additive bias built at the (small) mask shape, then broadcast
            s = s + np.where(m, 0.0, -np.inf).astype(dt)
    if s.shape[axis] == 0:
        raise EmptyAttentionError("softmax over an empty axis")
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(dt)
    y = e

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(dt)
        return (y * (g - inner),)

    return _make(y, (scores,), bw, "masked_softmax")


def softmax(scores: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(scores, None, axis=axis)


def mean_square(x: Tensor, mask=None) -> Tensor:
    """Mean of ``x**2`` over all elements, or over elements where ``mask`` holds.

    ``mask`` broadcasts against ``x``; the denominator counts broadcast
    elements, so a (B, T, 1) frame mask over (B, T, H) values averages over
    unmasked frames and feature dims.
    """
    xd = x.data
    if mask is None:
        w = None
        n = xd.size
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        n = int(w.sum())
        if n == 0:
            raise EmptyAttentionError("mean_square over an empty mask")
    sq = xd.astype(np.float64) ** 2
    if w is not None:
        sq = sq * w
    out = np.asarray(sq.sum() / n, dtype=x.dtype)

    def bw(g):
        gx = (2.0 / n) * g * xd
        if w is not None:
            gx = gx * w
        return (gx.astype(x.dtype),)

    return _make(out, (x,), bw, "mean_square")

