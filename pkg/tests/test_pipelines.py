import numpy as np
import pytest

from akd.checkpoint import load_checkpoint
from akd.distill import DistillWeights
from akd.errors import FreezeViolationError, ParseError
from akd.model import build_teacher
from akd.pipelines import (
    distill_adaptive,
    distill_conventional,
    evaluate,
    metrics_csv,
    pretrain_teacher,
    train_baseline,
    train_teacher_adapters,
)

from conftest import tiny_config, tiny_data

FULL = "L_DDSD + L_PL + L_ED + L_AR"


@pytest.fixture(scope="module")
def data():
    return tiny_data(tiny_config())


@pytest.fixture(scope="module")
def teacher_encoder():
    return pretrain_teacher(tiny_config())


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _same(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


class TestBaseline:
    def test_log_has_one_record_per_epoch(self, data):
        res = train_baseline(tiny_config(epochs=3), *data)
        assert [r.epoch for r in res.log] == [1, 2, 3]
        splits = {row["split"] for r in res.log for row in r.rows}
        assert splits == {"train", "val"}

    def test_training_loss_decreases(self, data):
        res = train_baseline(tiny_config(epochs=4, optim={"lr": 3e-3}), *data)
        train = [row["total"] for r in res.log for row in r.rows
                 if row["split"] == "train" and row["invocation"] == "all"]
        assert train[-1] < train[0]

    def test_metrics_are_deterministic(self, data):
        a = metrics_csv(train_baseline(tiny_config(), *data).log)
        b = metrics_csv(train_baseline(tiny_config(), *data).log)
        assert a == b

    def test_evaluate_reports_every_type(self, data):
        res = train_baseline(tiny_config(epochs=1), *data)
        out = evaluate(res.student, data[1], context=1)
        assert sorted(out) == ["AG", "FCO", "HAG"]
        assert all(0.0 <= rate <= 1.0 for rate, _ in out.values())


class TestResume:
    def test_resume_matches_straight_run(self, data, tmp_path):
        cfg = tiny_config(epochs=4)
        ckpt = tmp_path / "mid.ckpt"

        def save_mid(trainer, rec):
            if rec.epoch == 2:
                trainer.save(ckpt)

        straight = train_baseline(cfg, *data, on_epoch=save_mid)
        resumed = train_baseline(cfg, *data, resume=ckpt)
        assert _same(_snapshot(straight.student.params()), _snapshot(resumed.student.params()))
        assert metrics_csv(straight.log) == metrics_csv(resumed.log)

    def test_resume_adaptive(self, data, teacher_encoder, tmp_path):
        cfg = tiny_config("adaptive_kd", FULL, epochs=2)
        ckpt = tmp_path / "mid.ckpt"

        def save_mid(trainer, rec):
            if rec.epoch == 1:
                trainer.save(ckpt)

        straight = distill_adaptive(cfg, teacher_encoder, *data, on_epoch=save_mid)
        resumed = distill_adaptive(cfg, teacher_encoder, *data, resume=ckpt)
        assert _same(_snapshot(straight.student.params()), _snapshot(resumed.student.params()))
        assert _same(_snapshot(straight.teacher.adapter_params()), _snapshot(resumed.teacher.adapter_params()))

    def test_corrupted_checkpoint_names_path(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a zip")
        with pytest.raises(ParseError, match="bad.ckpt"):
            load_checkpoint(bad)

    def test_freeze_flags_survive(self, data, teacher_encoder, tmp_path):
        res = train_teacher_adapters(tiny_config(epochs=1), teacher_encoder, *data)
        res.trainer.save(tmp_path / "t.ckpt")
        teacher = load_checkpoint(tmp_path / "t.ckpt").models["teacher"]
        assert teacher.encoder.frozen
        assert not any(t.frozen for t in teacher.adapters.values())
        assert teacher.fingerprint() == res.teacher.fingerprint()


class TestTeacherContracts:
    def test_encoder_unchanged_by_every_pipeline(self, data, teacher_encoder):
        before = teacher_encoder.fingerprint()
        teacher = train_teacher_adapters(tiny_config(epochs=1), teacher_encoder, *data).teacher
        assert teacher_encoder.fingerprint() == before
        distill_conventional(tiny_config("conventional_kd", FULL, epochs=1), teacher, *data)
        assert teacher_encoder.fingerprint() == before
        distill_adaptive(tiny_config("adaptive_kd", FULL, epochs=1, cache_teacher=False), teacher_encoder, *data)
        assert teacher_encoder.fingerprint() == before

    def test_teacher_adapters_fixed_without_teacher_loss(self, data, teacher_encoder):
        ref = _snapshot(build_teacher(teacher_encoder, 0, tiny_config().adapter_depth).adapter_params())
        off = distill_adaptive(tiny_config("adaptive_kd", FULL, teacher_ce=False, max_steps=10, epochs=10),
                               teacher_encoder, *data)
        assert off.trainer.step == 10
        assert _same(_snapshot(off.teacher.adapter_params()), ref)
        on = distill_adaptive(tiny_config("adaptive_kd", FULL, max_steps=1), teacher_encoder, *data)
        assert not _same(_snapshot(on.teacher.adapter_params()), ref)

    def test_conventional_teacher_hash_constant(self, data, teacher_encoder):
        teacher = train_teacher_adapters(tiny_config(epochs=1), teacher_encoder, *data).teacher
        before = teacher.fingerprint()
        res = distill_conventional(tiny_config("conventional_kd", FULL, epochs=2), teacher, *data)
        assert res.teacher.fingerprint() == before
        assert all(t.frozen for t in teacher.params().values())

    def test_unfrozen_teacher_encoder_rejected(self, data):
        from akd.encoders import Encoder
        from akd.model import ModelBundle
        from akd.pipelines import Trainer

        cfg = tiny_config()
        loose = ModelBundle(Encoder(cfg.teacher_config(), seed=0), {})
        with pytest.raises(FreezeViolationError):
            Trainer(cfg, data[0], data[1], None, loose, True)

    def test_all_adapters_trained(self, data, teacher_encoder):
        res = train_teacher_adapters(tiny_config(epochs=1), teacher_encoder, *data)
        assert {k.split(".")[0] for k in res.teacher.adapters} == {"HAG", "AG", "FCO"}


class TestReductions:
    def test_adaptive_without_kd_terms_is_baseline(self, data, teacher_encoder):
        cfg = tiny_config(max_steps=20, epochs=20)
        base = train_baseline(cfg, *data)
        akd = distill_adaptive(cfg.with_(pipeline="adaptive_kd", weights=DistillWeights()), teacher_encoder, *data)
        assert base.trainer.step == akd.trainer.step == 20
        mine = {k: v for k, v in _snapshot(akd.student.params()).items() if not k.startswith("align.")}
        assert _same(_snapshot(base.student.params()), mine)

    def test_conventional_equals_adaptive_with_fixed_teacher(self, data, teacher_encoder):
        teacher = train_teacher_adapters(tiny_config(epochs=1), teacher_encoder, *data).teacher
        adapters = _snapshot(teacher.adapter_params())
        cfg = tiny_config(losses=FULL, max_steps=6, epochs=6)
        conv = distill_conventional(cfg.with_(pipeline="conventional_kd"), teacher, *data)
        akd = distill_adaptive(cfg.with_(pipeline="adaptive_kd", optim=cfg.optim.__class__(teacher_lr=0.0)),
                               teacher_encoder, *data,
                               teacher_adapters={k[len("adapters."):]: conv.teacher.adapter_params()[k]
                                                 for k in adapters})
        assert _same(_snapshot(conv.student.params()), _snapshot(akd.student.params()))
