"""Shared test helpers: a central finite-difference oracle and small fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from akd.tensor import Tensor, backward, default_dtype, mul, no_grad, sum as tsum

FD_STEP = 1e-4
FD_RTOL = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; two (near) zero gradients count as agreeing."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den < 1e-10:
        return float(num)
    return float(num / den)


def project(out: Tensor, seed: int = 0) -> Tensor:
    """Reduce a tensor to a scalar through a fixed random weighting."""
    w = np.random.default_rng([seed, 99]).standard_normal(out.shape)
    return tsum(mul(out, Tensor(w)))


def grad_check(fn, arrays, step: float = FD_STEP, wrt=None) -> list[float]:
    """Relative error between backprop and central differences, one value per input.

    ``fn`` maps Tensors to a scalar Tensor.  Runs in 64-bit.  ``wrt`` picks
    which inputs to check (default: all).
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    with default_dtype(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        ts = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
        loss = fn(*ts)
        backward(loss)
        errors = []
        for i in wrt:
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                vals = []
                for delta in (step, -step):
                    flat[k] = orig + delta
                    with no_grad():
                        vals.append(fn(*[Tensor(a) for a in arrays]).item())
                flat[k] = orig
                numeric.reshape(-1)[k] = (vals[0] - vals[1]) / (2 * step)
            errors.append(relative_error(analytic, numeric))
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_STUDENT = {"kind": "transformer", "layers": 1, "hidden": 8, "heads": 2, "ff_hidden": 16, "max_len": 32}
TINY_TEACHER = {"kind": "conformer", "layers": 1, "hidden": 12, "heads": 2, "ff_hidden": 16, "conv_kernel": 3}


def tiny_config(pipeline="baseline", losses=None, **changes):
    """A run configuration small enough for unit tests (seconds per epoch)."""
    from akd.config import desk_config

    base = dict(
        student=TINY_STUDENT,
        teacher=TINY_TEACHER,
        context=1,
        epochs=2,
        batch_size=8,
        bucket=2,
        generator={"dim": 4, "length_range": (6, 12), "seed": 0},
        data={"n_train": 64, "n_test": 48},
        pretrain={"steps": 15, "aux_examples": 64, "batch_size": 8},
    )
    base.update(changes)
    return desk_config(pipeline, losses, **base)


def tiny_data(config, n=None, seed=0):
    from akd.data import GeneratorConfig, generate, split_by_id

    gen = GeneratorConfig(**{**config.generator.__dict__, "seed": seed})
    pool = generate(gen, n or config.data.n_train, prefix=f"t{seed}")
    return split_by_id(pool, 0.25)


# acceptance criteria report one line each at the end of the session
CRITERIA: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
