"""DDSD cross-entropy, the three distillation terms and their weighted sum.

Teacher-side inputs must already be detached from any graph; passing a tensor
that still requires gradients raises :class:`StopGradientError`.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np

from akd import functional as F
from akd.encoders import Params, init_linear
from akd.errors import AlignmentError, ConfigError, StopGradientError
from akd.tensor import Tensor, clamp_min, log, mean, mul, neg, sub, sum

PROB_FLOOR = 1e-12


@dataclass
class DistillWeights:
    lambda_ed: float = 0.0
    lambda_pl: float = 0.0
    lambda_ar: float = 0.0
    use_ddsd: bool = True
    use_pl: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_ed", "lambda_pl", "lambda_ar"):
            v = float(getattr(self, name))
            if v < 0 or not math.isfinite(v):
                raise ConfigError(f"{name} must be a non-negative finite number")
            setattr(self, name, v)
        if not (self.use_ddsd or self.use_pl):
            raise ConfigError("at least one of use_ddsd / use_pl must be set")

    @property
    def uses_teacher(self) -> bool:
        return self.lambda_ed > 0 or self.lambda_ar > 0 or (self.use_pl and self.lambda_pl > 0)

    @classmethod
    def from_row(cls, row: str, lambda_ed: float = 100.0, lambda_pl: float = 1.0,
                 lambda_ar: float = 1.0) -> "DistillWeights":
        """Weights for a loss-combination label such as ``"L_PL + L_ED + L_AR"``.

        ``"DDSD w/o KD"`` selects the plain cross-entropy baseline.
        """
        if row.strip().lower() in ("ddsd w/o kd", "baseline"):
            return cls()
        terms = {re.sub(r"^(l_|\\mathcal\{l\}_)", "", t.strip().lower()).strip("{}") for t in row.split("+")}
        unknown = terms - {"ddsd", "ed", "pl", "ar"}
        if unknown:
            raise ConfigError(f"unknown loss terms in {row!r}: {sorted(unknown)}")
        return cls(
            lambda_ed=lambda_ed if "ed" in terms else 0.0,
            lambda_pl=lambda_pl if "pl" in terms else 0.0,
            lambda_ar=lambda_ar if "ar" in terms else 0.0,
            use_ddsd="ddsd" in terms,
            use_pl="pl" in terms,
        )

    def to_dict(self) -> dict:
        return asdict(self)


KD_WEIGHTS = dict(lambda_ed=100.0, lambda_pl=1.0, lambda_ar=1.0)

LOSS_ROWS = (
    "DDSD w/o KD",
    "L_DDSD + L_ED",
    "L_DDSD + L_ED + L_AR",
    "L_PL + L_ED + L_AR",
    "L_DDSD + L_PL + L_ED + L_AR",
)


@dataclass
class LossBreakdown:
    l_ddsd: float
    l_ed: float
    l_pl: float
    l_ar: float
    total: float


class AlignProjection:
    """Trainable student -> teacher width map; identity when widths agree."""

    def __init__(self, student_hidden: int, teacher_hidden: int, rng: np.random.Generator | None = None,
                 params: Params | None = None):
        self.student_hidden = student_hidden
        self.teacher_hidden = teacher_hidden
        if params is not None:
            self.params = params
        elif student_hidden == teacher_hidden:
            self.params = {}
        else:
            self.params = {}
            init_linear(self.params, rng if rng is not None else np.random.default_rng(0),
                        "proj", student_hidden, teacher_hidden)

    @property
    def is_identity(self) -> bool:
        return not self.params

    def __call__(self, x: Tensor) -> Tensor:
        if self.is_identity:
            return x
        return F.linear(x, self.params["proj.w"], self.params["proj.b"])


def _check_detached(t: Tensor, what: str) -> None:
    if t.requires_grad:
        raise StopGradientError(f"{what} must be detached from the teacher graph")


def _onehot(labels, n: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_ddsd(p: Tensor, y) -> Tensor:
    """Mean over the batch of ``-log p[y]`` (probabilities floored at 1e-12)."""
    y = np.asarray(y, dtype=np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be binary")
    picked = sum(mul(p, _onehot(y, p.shape[-1], p.dtype)), axis=-1)
    return mean(neg(log(clamp_min(picked, PROB_FLOOR))))


def pseudo_labels(p_teacher) -> np.ndarray:
    """Argmax of teacher probabilities; ties go to class 0."""
    data = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher)
    return np.argmax(data, axis=-1)


def loss_pl(p_student: Tensor, p_teacher: Tensor) -> Tensor:
    _check_detached(p_teacher, "teacher probabilities")
    return loss_ddsd(p_student, pseudo_labels(p_teacher))


def loss_ed(e_teacher: Tensor, e_student: Tensor, align: AlignProjection | None, mask=None) -> Tensor:
    """Mean squared error between teacher embeddings and aligned student embeddings.

    Frame-level inputs are (B, T, H) and averaged over unmasked frames and
    feature dims; summary-level inputs are (B, H) and averaged over everything.
    """
    _check_detached(e_teacher, "teacher embeddings")
    if e_teacher.ndim == 3 and e_teacher.shape[:2] != e_student.shape[:2]:
        raise AlignmentError(f"teacher frames {e_teacher.shape[:2]} != student frames {e_student.shape[:2]}")
    if e_teacher.shape[0] != e_student.shape[0]:
        raise AlignmentError("teacher and student batch sizes differ")
    aligned = align(e_student) if align is not None else e_student
    if aligned.shape != e_teacher.shape:
        raise AlignmentError(f"aligned student shape {aligned.shape} != teacher shape {e_teacher.shape}")
    diff = sub(e_teacher, aligned)
    if mask is None or e_teacher.ndim == 2:
        return F.mean_square(diff)
    return F.mean_square(diff, np.asarray(mask, dtype=bool)[:, :, None])


def loss_ar(alpha_teacher: Tensor, alpha_student: Tensor, mask=None) -> Tensor:
    """Per-example sum over frames of squared attention differences, batch mean."""
    _check_detached(alpha_teacher, "teacher attention")
    if alpha_teacher.shape != alpha_student.shape:
        raise AlignmentError(f"attention shapes differ: {alpha_teacher.shape} vs {alpha_student.shape}")
    d = sub(alpha_teacher, alpha_student)
    sq = mul(d, d)
    if mask is not None:
        sq = mul(sq, np.asarray(mask, dtype=sq.dtype))
    return mean(sum(sq, axis=-1))


def combine(w: DistillWeights, l_ddsd: Tensor | None = None, l_ed: Tensor | None = None,
            l_pl: Tensor | None = None, l_ar: Tensor | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted student objective.

    Terms whose weight (or selector) is off are left out of the graph entirely,
    so a zero-weight run is numerically the plain DDSD run.
    """
    terms: list[Tensor] = []
    if w.use_ddsd:
        terms.append(_need(l_ddsd, "l_ddsd"))
    if w.lambda_ed > 0:
        terms.append(mul(_need(l_ed, "l_ed"), w.lambda_ed))
    if w.use_pl and w.lambda_pl > 0:
        terms.append(mul(_need(l_pl, "l_pl"), w.lambda_pl))
    if w.lambda_ar > 0:
        terms.append(mul(_need(l_ar, "l_ar"), w.lambda_ar))
    if not terms:
        raise ConfigError("degenerate objective: every loss term is switched off")
    total = terms[0]
    for t in terms[1:]:
        total = total + t

    def val(t):
        return float(t.item()) if t is not None else math.nan

    return total, LossBreakdown(val(l_ddsd), val(l_ed), val(l_pl), val(l_ar), float(total.item()))


def _need(t, name):
    if t is None:
        raise ConfigError(f"{name} is selected but was not computed")
    return t
