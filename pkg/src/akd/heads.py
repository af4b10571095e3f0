"""Global-attention summarisation and per-invocation classification adapters.

Each adapter owns a frame-scoring vector ``theta`` (hidden -> 1) and a small
classifier (hidden -> 2).  Teacher and student use the same adapter shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from akd import functional as F
from akd.data import INVOCATIONS, Batch, InvocationType
from akd.encoders import Params, _uniform, init_linear
from akd.errors import ConfigError, DimensionError
from akd.tensor import Tensor, concat, matmul, reshape, take


@dataclass
class HeadOutput:
    alpha: Tensor  # (B, T) attention weights, zero on padding
    z: Tensor  # (B, hidden) attention summary
    p: Tensor  # (B, 2) class probabilities; p[:, 1] is the detection score

    @property
    def scores(self) -> np.ndarray:
        return self.p.data[:, 1].astype(np.float64)


def init_adapters(hidden: int, rng: np.random.Generator, depth: int = 1,
                  invocations: Iterable[InvocationType] = INVOCATIONS) -> Params:
    """One adapter per invocation type, keyed ``<INV>.theta``, ``<INV>.fc<j>``, ``<INV>.out``."""
    if depth < 1:
        raise ConfigError("adapter depth must be >= 1")
    p: Params = {}
    for inv in invocations:
        name = InvocationType(inv).name
        p[f"{name}.theta"] = _uniform(rng, hidden, (hidden, 1), f"{name}.theta")
        for j in range(depth - 1):
            init_linear(p, rng, f"{name}.fc{j}", hidden, hidden)
        init_linear(p, rng, f"{name}.out", hidden, 2)
    return p


def adapter_depth(adapters: Params, invocation: str) -> int:
    return 1 + sum(1 for k in adapters if k.startswith(f"{invocation}.fc") and k.endswith(".w"))


def summarize(e: Tensor, mask, theta: Tensor) -> tuple[Tensor, Tensor]:
    """Score each frame with ``e_t . theta``, softmax over real frames, pool.

    Returns ``(alpha, z)`` with alpha (B, T) and z (B, hidden).
    """
    if e.ndim != 3:
        raise DimensionError(f"summarize expects (B, T, H) embeddings, got {e.shape}")
    b, t, h = e.shape
    if theta.shape != (h, 1):
        raise DimensionError(f"theta must be ({h}, 1), got {theta.shape}")
    s = reshape(matmul(e, theta), (b, t))
    alpha = F.masked_softmax(s, mask)
    z = reshape(matmul(reshape(alpha, (b, 1, t)), e), (b, h))
    return alpha, z


def classify(z: Tensor, adapters: Params, invocation: str) -> Tensor:
    """Fully connected layers then softmax; returns (B, 2) probabilities."""
    depth = adapter_depth(adapters, invocation)
    x = z
    for j in range(depth - 1):
        x = F.relu(F.linear(x, adapters[f"{invocation}.fc{j}.w"], adapters[f"{invocation}.fc{j}.b"]))
    logits = F.linear(x, adapters[f"{invocation}.out.w"], adapters[f"{invocation}.out.b"])
    return F.softmax(logits)


def route(e: Tensor, mask, invocations, adapters: Params) -> HeadOutput:
    """Send every example through the adapter of its own invocation type.

    Rows are grouped per type, processed, then restored to batch order, so an
    adapter never sees (or receives gradient from) another type's examples.
    """
    if isinstance(mask, Batch):
        mask, invocations = mask.mask, mask.invocations
    mask = np.asarray(mask, dtype=bool)
    invocations = np.asarray(invocations, dtype=np.int64)
    order, alphas, zs, ps = [], [], [], []
    for inv in INVOCATIONS:
        rows = np.flatnonzero(invocations == int(inv))
        if rows.size == 0:
            continue
        if f"{inv.name}.theta" not in adapters:
            raise ConfigError(f"no adapter for invocation {inv.name}")
        sub = e if rows.size == e.shape[0] else take(e, rows, axis=0)
        alpha, z = summarize(sub, mask[rows], adapters[f"{inv.name}.theta"])
        ps.append(classify(z, adapters, inv.name))
        alphas.append(alpha)
        zs.append(z)
        order.append(rows)
    if len(order) == 1:
        return HeadOutput(alphas[0], zs[0], ps[0])
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return HeadOutput(
        take(concat(alphas, axis=0), inverse, axis=0),
        take(concat(zs, axis=0), inverse, axis=0),
        take(concat(ps, axis=0), inverse, axis=0),
    )
