"""False-accept / false-reject rates, equal error rate and DET curves.

An example is accepted (called device-directed) when its score is at least
the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from akd.data import InvocationType
from akd.errors import ContractError, UndefinedRateError


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    invocation: InvocationType | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ContractError("scores and labels must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be binary")

    @property
    def positives(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def _require_both(self) -> None:
        if not (self.labels == 1).any() or not (self.labels == 0).any():
            raise UndefinedRateError("FAR/FRR need both positive and negative examples")


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    far: float
    frr: float


def far_frr(scored: ScoredSet, threshold: float) -> tuple[float, float]:
    scored._require_both()
    far = float(np.mean(scored.negatives >= threshold))
    frr = float(np.mean(scored.positives < threshold))
    return far, frr


def _sweep(scored: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (ascending) with FAR and FRR at each, extremes included."""
    scored._require_both()
    pos = np.sort(scored.positives)
    neg = np.sort(scored.negatives)
    distinct = np.unique(scored.scores)
    lo = distinct[0] - 1.0
    hi = distinct[-1] + 1.0
    thr = np.concatenate([[lo], distinct, [hi]])
    # accepted iff score >= thr  <=>  count of scores strictly below thr is rejected
    far = 1.0 - np.searchsorted(neg, thr, side="left") / neg.size
    frr = np.searchsorted(pos, thr, side="left") / pos.size
    return thr, far, frr


def det_curve(scored: ScoredSet) -> list[DetPoint]:
    """One point per distinct score plus the accept-all and reject-all extremes."""
    thr, far, frr = _sweep(scored)
    return [DetPoint(float(t), float(a), float(r)) for t, a, r in zip(thr, far, frr)]


def eer(scored: ScoredSet) -> tuple[float, float]:
    """Equal error rate and the (interpolated) threshold where FAR meets FRR."""
    thr, far, frr = _sweep(scored)
    d = far - frr
    exact = np.flatnonzero(d == 0)
    if exact.size:
        i = int(exact[0])
        return float(far[i]), float(thr[i])
    # d goes from +1 (accept all) to -1 (reject all) and is non-increasing
    i = int(np.flatnonzero(d > 0)[-1])
    w = d[i] / (d[i] - d[i + 1])
    rate = far[i] + w * (far[i + 1] - far[i])
    return float(rate), float(thr[i] + w * (thr[i + 1] - thr[i]))


def write_det_csv(path, points: Sequence[DetPoint]) -> None:
    lines = ["threshold,far,frr"]
    lines += [f"{p.threshold:.6f},{p.far:.6f},{p.frr:.6f}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def per_invocation(scores, labels, invocations) -> dict[InvocationType, ScoredSet]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    invocations = np.asarray(invocations, dtype=np.int64)
    out = {}
    for inv in InvocationType:
        rows = invocations == int(inv)
        if rows.any():
            out[inv] = ScoredSet(scores[rows], labels[rows], inv)
    return out
