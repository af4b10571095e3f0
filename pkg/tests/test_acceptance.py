"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Criterion 8 trains the full desk-scale comparison (three seeds) and takes
roughly ten minutes on one core.
"""

import json
import time

import numpy as np
import pytest

from akd import functional as F
from akd.checkpoint import load_checkpoint
from akd.data import Batch, splice
from akd.distill import (
    AlignProjection,
    DistillWeights,
    combine,
    loss_ar,
    loss_ddsd,
    loss_ed,
    loss_pl,
)
from akd.encoders import preset
from akd.experiment import FULL_ROW, run_desk_experiment
from akd.heads import classify, init_adapters, summarize
from akd.metrics import ScoredSet, det_curve, eer, write_det_csv
from akd.model import build_student, build_teacher
from akd.pipelines import (
    distill_adaptive,
    distill_conventional,
    metrics_csv,
    pretrain_teacher,
    train_baseline,
    train_teacher_adapters,
)
from akd.tensor import Tensor, backward, default_dtype
from akd import tensor as T

from conftest import FD_RTOL, grad_check, project, report_criterion, tiny_config, tiny_data
from test_functional import KERNELS
from test_metrics import brute_force_eer
from test_tensor import OPS


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _same(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def data():
    return tiny_data(tiny_config())


@pytest.fixture(scope="module")
def teacher_encoder():
    return pretrain_teacher(tiny_config())


# -- 1 -----------------------------------------------------------------------------


def _gradient_cases(rng):
    """(name, fn, arrays) for every differentiable kernel and every full loss."""
    cases = []
    for name, (fn, shapes) in {**OPS, **KERNELS}.items():
        arrays = [rng.standard_normal(s) for s in shapes]
        if name == "relu":
            arrays[0] = np.sign(arrays[0]) * (np.abs(arrays[0]) + 0.1)
        cases.append((name, lambda *ts, fn=fn: project(fn(*ts), 3), arrays))
    cases.append(("log", lambda a: project(T.log(a), 3), [rng.uniform(0.2, 3.0, (3, 4))]))
    cases.append(("clamp_min", lambda a: project(T.clamp_min(a, 0.5), 3),
                  [np.where(rng.random((3, 4)) < 0.5, 0.1, 0.9) + rng.uniform(-0.05, 0.05, (3, 4))]))
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    cases.append(("masked_softmax", lambda s: project(F.masked_softmax(s, mask), 3),
                  [rng.standard_normal((2, 4))]))
    cases.append(("summarize", lambda e, th: project(summarize(e, mask, th)[1], 3) +
                  project(summarize(e, mask, th)[0], 4),
                  [rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 1))]))
    with default_dtype(np.float64):
        adapters = init_adapters(3, np.random.default_rng(0), depth=2)
    names = sorted(k for k in adapters if k.startswith("AG.") and not k.endswith("theta"))
    cases.append(("classify", lambda z, *ps: project(classify(z, dict(zip(names, ps)), "AG"), 3),
                  [rng.standard_normal((4, 3))] + [adapters[n].data for n in names]))

    labels = rng.integers(0, 2, 5)
    teacher_p = rng.dirichlet([1, 1], size=5)
    teacher_e = rng.standard_normal((2, 4, 3))
    teacher_a = rng.dirichlet(np.ones(4), size=2) * mask
    cases.append(("L_DDSD", lambda p: loss_ddsd(p, labels), [rng.dirichlet([2, 2], size=5)]))

    def ed(es, w, b):
        return loss_ed(_t(teacher_e), es, AlignProjection(2, 3, params={"proj.w": w, "proj.b": b}), mask)

    cases.append(("L_ED", ed, [rng.standard_normal((2, 4, 2)), rng.standard_normal((2, 3)), rng.standard_normal(3)]))
    cases.append(("L_PL", lambda p: loss_pl(p, _t(teacher_p)), [rng.dirichlet([2, 2], size=5)]))
    cases.append(("L_AR", lambda a: loss_ar(_t(teacher_a), a, mask), [rng.dirichlet(np.ones(4), size=2)]))

    full = DistillWeights.from_row(FULL_ROW)

    def total(p, es, a):
        l_ed = loss_ed(_t(teacher_e[..., :2]), es, None, mask)
        return combine(full, loss_ddsd(p, labels), l_ed, loss_pl(p, _t(teacher_p)), loss_ar(_t(teacher_a), a, mask))[0]

    cases.append(("combined", total, [rng.dirichlet([2, 2], size=5), rng.standard_normal((2, 4, 2)),
                                      rng.dirichlet(np.ones(4), size=2)]))
    return cases


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst, failures, checked = 0.0, [], 0
    for seed in range(10):
        for name, fn, arrays in _gradient_cases(np.random.default_rng(seed)):
            err = max(grad_check(fn, arrays))
            checked += 1
            worst = max(worst, err)
            if not err < FD_RTOL:
                failures.append(f"{name}@{seed}={err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    report_criterion(1, ok, f"{checked} finite-difference checks, worst relative error {worst:.2e}, "
                            f"{elapsed:.1f}s {failures[:5] or ''}")
    assert ok


# -- 2 -----------------------------------------------------------------------------


def test_criterion_02_attention_pooling_properties():
    rng = np.random.default_rng(2024)
    problems = []
    with default_dtype(np.float64):
        for i in range(100):
            b, t, h = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 5)
            lengths = rng.integers(1, t + 1, size=b)
            mask = np.arange(t)[None, :] < lengths[:, None]
            e = rng.standard_normal((b, t, h)) * rng.uniform(0.1, 5)
            theta = Tensor(rng.standard_normal((h, 1)) * rng.uniform(0.1, 5))
            alpha, z = summarize(Tensor(e), mask, theta)
            if not np.allclose(alpha.data.sum(-1), 1.0, atol=1e-12):
                problems.append(f"normalization #{i}")
            if alpha.data[~mask].any():
                problems.append(f"masked zeros #{i}")
            perm = rng.permutation(t)
            _, zp = summarize(Tensor(e[:, perm]), mask[:, perm], theta)
            if not np.allclose(zp.data, z.data, atol=1e-12):
                problems.append(f"permutation #{i}")
            a0, z0 = summarize(Tensor(e), mask, Tensor(np.zeros((h, 1))))
            uniform = mask / lengths[:, None]
            means = (e * mask[..., None]).sum(1) / lengths[:, None]
            if not (np.allclose(a0.data, uniform, atol=1e-12) and np.allclose(z0.data, means, atol=1e-12)):
                problems.append(f"uniform theta #{i}")
    report_criterion(2, not problems, f"100 random instances, violations: {problems[:5] or 'none'}")
    assert not problems


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_loss_zero_identities():
    zeros = {
        "L_DDSD": loss_ddsd(_t([[0.0, 1.0], [1.0, 0.0]]), [1, 0]).item(),
        "L_ED": loss_ed(_t(np.ones((2, 3, 4))), _t(np.ones((2, 3, 4))), None).item(),
        "L_PL": loss_pl(_t([[0.0, 1.0], [1.0, 0.0]]), _t([[0.3, 0.7], [0.6, 0.4]])).item(),
        "L_AR": loss_ar(_t([[0.25, 0.75]]), _t([[0.25, 0.75]])).item(),
    }
    rng = np.random.default_rng(3)
    negative = []
    for i in range(1000):
        b, t, h = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 4)
        mask = np.arange(t)[None, :] < rng.integers(1, t + 1, size=b)[:, None]
        vals = (
            loss_ddsd(_t(rng.dirichlet([1, 1], size=b)), rng.integers(0, 2, b)).item(),
            loss_ed(_t(rng.standard_normal((b, t, h))), _t(rng.standard_normal((b, t, h))), None, mask).item(),
            loss_pl(_t(rng.dirichlet([1, 1], size=b)), _t(rng.dirichlet([1, 1], size=b))).item(),
            loss_ar(_t(rng.dirichlet(np.ones(t), size=b)), _t(rng.dirichlet(np.ones(t), size=b)), mask).item(),
        )
        if min(vals) < 0:
            negative.append(i)
    ok = all(v == 0.0 for v in zeros.values()) and not negative
    report_criterion(3, ok, f"zero on matching input {zeros}, negative on {len(negative)}/1000 random inputs")
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_criterion_04_stop_gradient_and_freeze(data, teacher_encoder):
    enc_hash = teacher_encoder.fingerprint()
    checks = {}
    step1 = train_teacher_adapters(tiny_config(epochs=2), teacher_encoder, *data)
    checks["encoder/teacher adapters"] = teacher_encoder.fingerprint() == enc_hash
    teacher = step1.teacher
    teacher_hash = teacher.fingerprint()
    distill_conventional(tiny_config("conventional_kd", FULL_ROW, epochs=2), teacher, *data)
    checks["encoder/conventional"] = teacher_encoder.fingerprint() == enc_hash
    checks["(c) conventional teacher hash"] = teacher.fingerprint() == teacher_hash
    distill_adaptive(tiny_config("adaptive_kd", FULL_ROW, epochs=2, cache_teacher=False), teacher_encoder, *data)
    checks["encoder/adaptive"] = teacher_encoder.fingerprint() == enc_hash
    train_baseline(tiny_config(epochs=1), *data)
    checks["encoder/baseline"] = teacher_encoder.fingerprint() == enc_hash

    ref = _snapshot(build_teacher(teacher_encoder, 0, tiny_config().adapter_depth).adapter_params())
    off = distill_adaptive(tiny_config("adaptive_kd", FULL_ROW, teacher_ce=False, max_steps=10, epochs=10),
                           teacher_encoder, *data)
    checks["(b) adapters fixed without teacher CE"] = (
        off.trainer.step == 10 and _same(_snapshot(off.teacher.adapter_params()), ref))
    ok = all(checks.values())
    report_criterion(4, ok, ", ".join(f"{k}={'ok' if v else 'CHANGED'}" for k, v in checks.items()))
    assert ok


# -- 5 -----------------------------------------------------------------------------


def test_criterion_05_baseline_reduction(data, teacher_encoder):
    cfg = tiny_config(max_steps=20, epochs=20)
    base = train_baseline(cfg, *data)
    akd = distill_adaptive(cfg.with_(pipeline="adaptive_kd", weights=DistillWeights(use_pl=False)),
                           teacher_encoder, *data)
    student = {k: v for k, v in _snapshot(akd.student.params()).items() if not k.startswith("align.")}
    ok = base.trainer.step == akd.trainer.step == 20 and _same(_snapshot(base.student.params()), student)
    report_criterion(5, ok, f"{akd.trainer.step} steps, student parameters bitwise "
                            f"{'identical' if ok else 'DIFFERENT'}")
    assert ok


# -- 6 -----------------------------------------------------------------------------


def test_criterion_06_eer_oracle():
    rng = np.random.default_rng(6)
    n = 200
    worst, invariant = 0.0, True
    for _ in range(50):
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        p = 1 / (1 + np.exp(-(rng.standard_normal(n) + rng.uniform(0, 2) * labels)))
        s = ScoredSet(p, labels)
        worst = max(worst, abs(eer(s)[0] - brute_force_eer(s)))
        logit = np.log(p / (1 - p))
        same_ranks = np.array_equal(np.argsort(p, kind="stable"), np.argsort(logit, kind="stable"))
        invariant &= same_ranks and eer(ScoredSet(logit, labels))[0] == eer(s)[0]
    # the float epsilon only absorbs rounding in 1/N itself
    ok = worst <= 1 / n + 1e-12 and invariant
    report_criterion(6, ok, f"50 sets N={n}: max |eer - grid oracle| = {worst:.4f} (limit {1 / n:.4f}), "
                            f"logit invariance {'exact' if invariant else 'BROKEN'}")
    assert ok


# -- 7 -----------------------------------------------------------------------------

DET_FIXTURE = (
    b"threshold,far,frr\n"
    b"-0.600000,1.000000,0.000000\n"
    b"0.400000,1.000000,0.000000\n"
    b"0.600000,0.500000,0.000000\n"
    b"0.700000,0.500000,0.500000\n"
    b"0.900000,0.000000,0.500000\n"
    b"1.900000,0.000000,1.000000\n"
)


def test_criterion_07_det_validity(tmp_path):
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.standard_normal(n) + rng.uniform(-1, 2) * labels, int(rng.integers(0, 3)))
        pts = det_curve(ScoredSet(scores, labels))
        far = np.array([p.far for p in pts])
        frr = np.array([p.frr for p in pts])
        ok = ((np.diff(far) <= 0).all() and (np.diff(frr) >= 0).all()
              and (far[0], frr[0]) == (1.0, 0.0) and (far[-1], frr[-1]) == (0.0, 1.0))
        bad += not ok
    write_det_csv(tmp_path / "det.csv", det_curve(ScoredSet([0.9, 0.6, 0.4, 0.7], [1, 1, 0, 0])))
    csv_ok = (tmp_path / "det.csv").read_bytes() == DET_FIXTURE
    ok = bad == 0 and csv_ok
    report_criterion(7, ok, f"{100 - bad}/100 curves monotone with both extremes, fixture CSV "
                            f"{'byte-exact' if csv_ok else 'DIFFERS'}")
    assert ok


# -- 8 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_directional_result(tmp_path):
    report = run_desk_experiment((0, 1, 2), out_dir=tmp_path)
    checks = report.checks()
    in_time = report.seconds <= 15 * 60
    ok = all(checks.values()) and in_time
    medians = json.dumps({m: {k: round(v, 4) for k, v in report.median(m).items()}
                          for m in ("teacher", "baseline", "conventional_kd", "adaptive_kd")})
    report_criterion(8, ok, f"{checks}, {report.seconds:.0f}s; medians {medians}")
    print(report.table())
    assert ok, report.table()


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_determinism_and_resume(data, teacher_encoder, tmp_path):
    cfg = tiny_config("adaptive_kd", FULL_ROW, epochs=4)
    ckpt = tmp_path / "mid.ckpt"

    def save_mid(trainer, rec):
        if rec.epoch == 2:
            trainer.save(ckpt)

    first = distill_adaptive(cfg, teacher_encoder, *data, on_epoch=save_mid)
    second = distill_adaptive(cfg, teacher_encoder, *data)
    resumed = distill_adaptive(cfg, teacher_encoder, *data, resume=load_checkpoint(ckpt))
    same_csv = metrics_csv(first.log) == metrics_csv(second.log)
    same_resume = (_same(_snapshot(first.student.params()), _snapshot(resumed.student.params()))
                   and _same(_snapshot(first.teacher.params()), _snapshot(resumed.teacher.params()))
                   and metrics_csv(first.log) == metrics_csv(resumed.log))
    base = tiny_config(epochs=4)
    b1 = train_baseline(base, *data, on_epoch=lambda tr, rec: rec.epoch == 2 and tr.save(tmp_path / "b.ckpt"))
    b2 = train_baseline(base, *data, resume=tmp_path / "b.ckpt")
    same_resume &= _same(_snapshot(b1.student.params()), _snapshot(b2.student.params()))
    ok = same_csv and same_resume
    report_criterion(9, ok, f"metric CSV repeat {'identical' if same_csv else 'DIFFERS'}, resume at epoch 2 "
                            f"{'bitwise equal' if same_resume else 'DIFFERS'}")
    assert ok


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_full_scale_presets():
    details, ok = [], True
    rng = np.random.default_rng(10)
    raw = rng.standard_normal((6, 40)).astype(np.float32)
    spliced = splice(raw, 3)
    ok &= spliced.shape == (6, 280)
    for name in ("paper-transformer", "paper-conformer"):
        cfg = preset(name)
        bundle = build_student(cfg, seed=0)
        count = sum(t.size for t in bundle.params().values())
        within = 3.5e6 <= count <= 6.5e6
        x = np.stack([spliced, spliced[::-1]])
        mask = np.array([[True] * 6, [True] * 4 + [False] * 2])
        batch = Batch(x, mask, np.array([1, 0]), np.array([0, 2]), ["a", "b"])
        _, out = bundle.forward(batch)
        loss = loss_ddsd(out.p, batch.labels)
        backward(loss)
        grads = all(t.grad is not None for t in bundle.encoder.params.values())
        ok &= within and grads and np.isfinite(loss.item())
        details.append(f"{name} {count / 1e6:.2f}M params, backward {'ok' if grads else 'MISSING grads'}")
    report_criterion(10, ok, "splice 40->280 ok; " + "; ".join(details))
    assert ok
