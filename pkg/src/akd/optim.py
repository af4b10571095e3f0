"""Adam and a reduce-on-plateau learning-rate scheduler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from akd.errors import ConfigError, ContractError, FreezeViolationError
from akd.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ContractError(f"missing gradient for {missing[0]!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if p.frozen:
            raise FreezeViolationError(f"optimizer update on frozen parameter {name!r}")
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a named set of parameter tensors, reading ``Tensor.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def state_dict(self) -> dict:
        s = self.state
        return {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step,
            "m": {k: a.copy() for k, a in s.m.items()},
            "v": {k: a.copy() for k, a in s.v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.state = AdamState(
            lr=float(d["lr"]), beta1=float(d["beta1"]), beta2=float(d["beta2"]),
            eps=float(d["eps"]), step=int(d["step"]),
            m={k: np.array(a) for k, a in d["m"].items()},
            v={k: np.array(a) for k, a in d["v"].items()},
        )


@dataclass
class PlateauScheduler:
    """Halve (by default) the learning rate when a lower-is-better metric stalls.

    The rate is cut once ``patience`` consecutive epochs pass without a strict
    improvement on the best value seen, after which the counter restarts.
    """

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-8
    best_metric: float = math.inf
    epochs_since_improve: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ConfigError("plateau factor must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("plateau patience must be a positive integer")
        self.lr = max(self.lr, self.min_lr)

    def update(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise ContractError(f"plateau metric must be finite, got {metric}")
        if metric < self.best_metric:
            self.best_metric = metric
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
            if self.epochs_since_improve >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.epochs_since_improve = 0
        return self.lr

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "factor": self.factor, "patience": self.patience, "min_lr": self.min_lr,
            "best_metric": self.best_metric, "epochs_since_improve": self.epochs_since_improve,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "PlateauScheduler":
        return cls(**d)


def scheduler_update(sched: PlateauScheduler, validation_metric: float) -> float:
    return sched.update(validation_metric)
