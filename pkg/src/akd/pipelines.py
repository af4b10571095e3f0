"""Baseline, conventional two-step KD and adaptive KD training procedures.

All four procedures share one epoch loop (:class:`Trainer`).  What differs is
which models exist and which of them the loop updates:

============================  ===============  ========================
procedure                     teacher adapters student
============================  ===============  ========================
``train_baseline``            (none)           L_DDSD
``train_teacher_adapters``    L_DDSD^T         (none)
``distill_conventional``      frozen           weighted KD objective
``distill_adaptive``          L_DDSD^T         weighted KD objective
============================  ===============  ========================

The teacher encoder is frozen in every case.  KD terms only ever see
detached teacher tensors, and after each student backward pass the loop
checks that no teacher parameter received a gradient.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from akd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from akd.config import RunConfig
from akd.data import INVOCATIONS, Batch, FeatureSequence, GeneratorConfig, generate_aux, make_batches, splice
from akd.distill import (
    DistillWeights,
    LossBreakdown,
    combine,
    loss_ar,
    loss_ddsd,
    loss_ed,
    loss_pl,
)
from akd.encoders import Encoder, EncoderConfig, pretrain_teacher_encoder
from akd.errors import ConfigError, ContractError, FreezeViolationError, NumericalError, StopGradientError
from akd.heads import HeadOutput
from akd.metrics import eer, per_invocation
from akd.model import ModelBundle, build_student, build_teacher, embed_dataset, pad_embeddings, score_dataset
from akd.optim import Adam, PlateauScheduler
from akd.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "invocation", "loss_ddsd", "loss_ed", "loss_pl", "loss_ar", "total", "lr")


@dataclass
class EpochRecord:
    """Everything logged for one epoch: one row per (split, invocation)."""

    epoch: int
    rows: list[dict] = field(default_factory=list)

    def row(self, split: str, invocation: str = "all") -> dict:
        for r in self.rows:
            if r["split"] == split and r["invocation"] == invocation:
                return r
        raise KeyError((split, invocation))


@dataclass
class RunResult:
    student: ModelBundle | None
    teacher: ModelBundle | None
    log: list[EpochRecord]
    trainer: "Trainer"


def metrics_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for rec in records:
        for r in rec.rows:
            w.writerow([_fmt_metric(r.get(k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def _fmt_metric(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class _Meter:
    """Example-weighted running means of loss components."""

    def __init__(self) -> None:
        self.sums = dict.fromkeys(("loss_ddsd", "loss_ed", "loss_pl", "loss_ar", "total"), 0.0)
        self.counts = dict.fromkeys(self.sums, 0)

    def add(self, b: LossBreakdown, n: int) -> None:
        for key, v in zip(self.sums, (b.l_ddsd, b.l_ed, b.l_pl, b.l_ar, b.total)):
            if not math.isnan(v):
                self.sums[key] += v * n
                self.counts[key] += n

    def means(self) -> dict:
        return {k: (self.sums[k] / self.counts[k] if self.counts[k] else math.nan) for k in self.sums}


class Trainer:
    """Shared epoch loop for every procedure.

    ``student`` and ``teacher`` may each be absent.  ``teacher_trainable``
    says whether teacher adapters are optimised (on their own cross-entropy,
    with their own Adam state and plateau scheduler).
    """

    def __init__(self, config: RunConfig, train: Sequence[FeatureSequence], val: Sequence[FeatureSequence],
                 student: ModelBundle | None, teacher: ModelBundle | None, teacher_trainable: bool,
                 weights: DistillWeights | None = None):
        if student is None and teacher is None:
            raise ConfigError("nothing to train")
        if not train:
            raise ContractError("training set is empty")
        self.config = config
        self.train = list(train)
        self.val = list(val)
        self.student = student
        self.teacher = teacher
        self.teacher_trainable = teacher_trainable and teacher is not None
        self.weights = weights if weights is not None else config.weights
        self.epoch = 0
        self.step = 0
        self.log: list[EpochRecord] = []
        self.rng = np.random.default_rng([config.seed, 7])
        o = config.optim
        self.s_opt = self.s_sched = self.t_opt = self.t_sched = None
        if student is not None:
            self.s_opt = Adam(student.trainable(), lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps)
            self.s_sched = PlateauScheduler(o.lr, o.plateau_factor, o.plateau_patience, o.min_lr)
        if teacher is not None:
            if not teacher.encoder.frozen:
                raise FreezeViolationError("teacher encoder must be frozen")
            if self.teacher_trainable:
                self.t_opt = Adam(teacher.adapter_params(), lr=o.teacher_lr, betas=(o.beta1, o.beta2), eps=o.eps)
                self.t_sched = PlateauScheduler(o.teacher_lr, o.plateau_factor, o.plateau_patience,
                                                min(o.min_lr, o.teacher_lr))
            else:
                teacher.freeze()
            self._teacher_encoder_hash = teacher.encoder.fingerprint()
            self._teacher_hash = teacher.fingerprint()
        self._spliced = {s.id: splice(s, config.context) for s in (*self.train, *self.val)}
        self._cache = None
        if teacher is not None and config.cache_teacher:
            self._cache = embed_dataset(teacher.encoder, [*self.train, *self.val], config.context)

    # -- teacher side ------------------------------------------------------------

    def _teacher_embeddings(self, batch: Batch) -> Tensor:
        if self._cache is not None:
            return Tensor._wrap(pad_embeddings(self._cache, batch, self.teacher.encoder.params["input.w"].dtype))
        with no_grad():
            return self.teacher.encoder.encode(batch.frames, batch.mask)

    def _teacher_step(self, batch: Batch, et: Tensor, update: bool) -> tuple[HeadOutput, float]:
        """Teacher heads on a batch; optionally one adapter update on L_DDSD^T.

        The returned outputs are detached and computed before the update.
        """
        if update and self.config.teacher_ce:
            self.t_opt.zero_grad()
            out = self.teacher.heads(et, batch)
            lt = loss_ddsd(out.p, batch.labels)
            backward(lt)
            self.t_opt.step()
        else:
            with no_grad():
                out = self.teacher.heads(et, batch)
                lt = loss_ddsd(out.p, batch.labels)
        return HeadOutput(out.alpha.detach(), out.z.detach(), out.p.detach()), lt.item()

    def _verify_teacher(self) -> None:
        if self.teacher is None:
            return
        if self.teacher.encoder.fingerprint() != self._teacher_encoder_hash:
            raise FreezeViolationError("teacher encoder parameters changed")
        if not self.teacher_trainable and self.teacher.fingerprint() != self._teacher_hash:
            raise FreezeViolationError("frozen teacher parameters changed during distillation")

    # -- student side ------------------------------------------------------------

    def _student_losses(self, batch: Batch, es: Tensor, out: HeadOutput, et: Tensor | None,
                        tout: HeadOutput | None, w: DistillWeights, everything: bool = False):
        """Loss terms needed by ``w`` (or all available ones when ``everything``)."""
        l_ddsd = l_ed = l_pl = l_ar = None
        if w.use_ddsd or everything:
            l_ddsd = loss_ddsd(out.p, batch.labels)
        if tout is not None:
            if w.lambda_ed > 0 or everything:
                if self.config.ed_target == "frames":
                    l_ed = loss_ed(et, es, self.student.align, batch.mask)
                else:
                    l_ed = loss_ed(tout.z, out.z, self.student.align)
            if (w.use_pl and w.lambda_pl > 0) or everything:
                l_pl = loss_pl(out.p, tout.p)
            if w.lambda_ar > 0 or everything:
                l_ar = loss_ar(tout.alpha, out.alpha, batch.mask)
        return l_ddsd, l_ed, l_pl, l_ar

    def _student_step(self, batch: Batch, et: Tensor | None, tout: HeadOutput | None) -> LossBreakdown:
        w = self.weights
        self.s_opt.zero_grad()
        if self.teacher is not None:
            for t in self.teacher.params().values():
                t.grad = None
        es, out = self.student.forward(batch)
        terms = self._student_losses(batch, es, out, et, tout, w)
        total, breakdown = combine(w, *terms)
        backward(total)
        if self.teacher is not None:
            leaked = [k for k, t in self.teacher.params().items() if t.grad is not None]
            if leaked:
                raise StopGradientError(f"distillation gradient reached teacher parameter {leaked[0]}")
        self.s_opt.step()
        return breakdown

    # -- loop ----------------------------------------------------------------------

    def _batches(self, data, epoch, shuffle=True):
        return make_batches(data, self.config.batch_size, self.config.seed, epoch, self.config.context,
                            shuffle=shuffle, spliced=self._spliced, bucket=self.config.bucket if shuffle else 0)

    def run_epoch(self) -> EpochRecord:
        self.epoch += 1
        s_meter, t_meter = _Meter(), _Meter()
        for bi, batch in enumerate(self._batches(self.train, self.epoch)):
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
            try:
                et = tout = None
                if self.teacher is not None:
                    et = self._teacher_embeddings(batch)
                    tout, lt = self._teacher_step(batch, et, update=self.teacher_trainable)
                    t_meter.add(LossBreakdown(lt, math.nan, math.nan, math.nan, lt), batch.size)
                if self.student is not None:
                    s_meter.add(self._student_step(batch, et, tout), batch.size)
            except NumericalError as exc:
                raise NumericalError(f"epoch {self.epoch} batch {bi}: {exc}") from exc
            self.step += 1
        rec = EpochRecord(self.epoch)
        if self.student is not None:
            rec.rows.append(self._row("train", "all", s_meter.means(), self.s_opt.lr))
        if self.teacher_trainable:
            rec.rows.append(self._row("teacher_train", "all", t_meter.means(), self.t_opt.lr))
        self._validate(rec)
        self._verify_teacher()
        self.log.append(rec)
        return rec

    def _row(self, split, inv, means, lr) -> dict:
        return {"epoch": self.epoch, "split": split, "invocation": inv, **means, "lr": float(lr)}

    def _validate(self, rec: EpochRecord) -> None:
        if not self.val:
            return
        per_type: dict[str, tuple[_Meter, _Meter]] = {}
        for inv in INVOCATIONS:
            subset = [s for s in self.val if s.invocation == inv]
            if not subset:
                continue
            s_meter, t_meter = _Meter(), _Meter()
            for batch in self._batches(subset, 0, shuffle=False):
                with no_grad():
                    et = tout = None
                    if self.teacher is not None:
                        et = self._teacher_embeddings(batch)
                        tout = self.teacher.heads(et, batch)
                        lt = loss_ddsd(tout.p, batch.labels).item()
                        t_meter.add(LossBreakdown(lt, math.nan, math.nan, math.nan, lt), batch.size)
                    if self.student is not None:
                        es, out = self.student.forward(batch)
                        terms = self._student_losses(batch, es, out, et, tout, self.weights, everything=True)
                        total, _ = combine(self.weights, *terms)
                        vals = [t.item() if t is not None else math.nan for t in terms]
                        s_meter.add(LossBreakdown(*vals, total.item()), batch.size)
            per_type[inv.name] = (s_meter, t_meter)
        # overall = example-weighted merge of the per-type meters
        for role, idx in (("student", 0), ("teacher", 1)):
            if role == "student" and self.student is None:
                continue
            if role == "teacher" and self.teacher is None:
                continue
            merged = _Meter()
            for meters in per_type.values():
                m = meters[idx]
                for k in merged.sums:
                    merged.sums[k] += m.sums[k]
                    merged.counts[k] += m.counts[k]
            split = "val" if role == "student" else "teacher_val"
            if role == "student":
                sched, opt = self.s_sched, self.s_opt
            else:
                sched, opt = self.t_sched, self.t_opt
            means = merged.means()
            if sched is not None:
                opt.lr = sched.update(means["total"])
            lr = opt.lr if opt is not None else 0.0
            rec.rows.append(self._row(split, "all", means, lr))
            for name, meters in per_type.items():
                rec.rows.append(self._row(split, name, meters[idx].means(), lr))

    def run(self, epochs: int | None = None, on_epoch: Callable[["Trainer", EpochRecord], None] | None = None):
        target = epochs if epochs is not None else self.config.epochs
        while self.epoch < target:
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
            rec = self.run_epoch()
            log.info("epoch %d %s", rec.epoch, {r["split"]: round(r["total"], 4) for r in rec.rows
                                                 if r["invocation"] == "all"})
            if on_epoch is not None:
                on_epoch(self, rec)
        return self.log

    # -- checkpointing -------------------------------------------------------------

    def models(self) -> dict[str, ModelBundle]:
        out = {}
        if self.student is not None:
            out["student"] = self.student
        if self.teacher is not None:
            out["teacher"] = self.teacher
        return out

    def save(self, path) -> None:
        opts = {k: o for k, o in (("student", self.s_opt), ("teacher", self.t_opt)) if o is not None}
        scheds = {k: s for k, s in (("student", self.s_sched), ("teacher", self.t_sched)) if s is not None}
        save_checkpoint(path, self.models(), opts, scheds, self.epoch, self.step, self.config.to_dict(),
                        self.rng.bit_generator.state, {"log": [r.rows for r in self.log]})

    def restore(self, ckpt: Checkpoint) -> None:
        """Continue from ``ckpt``; model tensors are copied into the live bundles."""
        for role, bundle in self.models().items():
            saved = ckpt.models[role].params()
            live = bundle.params()
            if set(saved) != set(live):
                raise ContractError(f"checkpoint {role} parameters do not match the configured model")
            for k, t in live.items():
                t.data[...] = saved[k].data
        for role, opt in (("student", self.s_opt), ("teacher", self.t_opt)):
            if opt is not None:
                opt.load_state_dict(ckpt.optimizers[role])
        if self.s_sched is not None:
            self.s_sched = PlateauScheduler.from_state_dict(ckpt.schedulers["student"])
        if self.t_sched is not None:
            self.t_sched = PlateauScheduler.from_state_dict(ckpt.schedulers["teacher"])
        self.epoch = ckpt.epoch
        self.step = ckpt.step
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.log = [EpochRecord(rows[0]["epoch"] if rows else i + 1, rows)
                    for i, rows in enumerate(ckpt.extra.get("log", []))]
        if self.teacher is not None:
            self._teacher_encoder_hash = self.teacher.encoder.fingerprint()
            self._teacher_hash = self.teacher.fingerprint()


def _resume(trainer: Trainer, resume) -> None:
    if resume is None:
        return
    ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
    trainer.restore(ckpt)


# -- procedures ----------------------------------------------------------------------


def train_baseline(config: RunConfig, train, val, resume=None, on_epoch=None) -> RunResult:
    """Student trained on cross-entropy alone."""
    student = build_student(config.student_config(), config.seed, config.adapter_depth)
    trainer = Trainer(config, train, val, student, None, False, weights=DistillWeights())
    _resume(trainer, resume)
    trainer.run(on_epoch=on_epoch)
    return RunResult(student, None, trainer.log, trainer)


def train_teacher_adapters(config: RunConfig, teacher_encoder: Encoder, train, val, resume=None,
                           on_epoch=None) -> RunResult:
    """Step one of conventional KD: adapters on top of the frozen teacher encoder."""
    teacher = build_teacher(teacher_encoder, config.seed, config.adapter_depth)
    trainer = Trainer(config.with_(teacher_ce=True), train, val, None, teacher, True)
    _resume(trainer, resume)
    trainer.run(on_epoch=on_epoch)
    return RunResult(None, teacher, trainer.log, trainer)


def distill_conventional(config: RunConfig, teacher: ModelBundle, train, val, resume=None,
                         on_epoch=None) -> RunResult:
    """Step two of conventional KD: everything in the teacher frozen, student on the KD objective."""
    student = build_student(config.student_config(), config.seed, config.adapter_depth, teacher.hidden)
    trainer = Trainer(config, train, val, student, teacher.freeze(), False)
    _resume(trainer, resume)
    trainer.run(on_epoch=on_epoch)
    return RunResult(student, teacher, trainer.log, trainer)


def distill_adaptive(config: RunConfig, teacher_encoder: Encoder, train, val, teacher_adapters=None,
                     resume=None, on_epoch=None) -> RunResult:
    """Teacher adapters and student trained together, step by step.

    Each step first runs the teacher heads on the frozen encoder output and
    updates the adapters on their own cross-entropy, then trains the student
    on the KD objective against the (pre-update, detached) teacher outputs.
    ``teacher_adapters`` optionally seeds the adapters (e.g. pre-converged).
    """
    teacher = build_teacher(teacher_encoder, config.seed, config.adapter_depth)
    if teacher_adapters is not None:
        for k, t in teacher.adapters.items():
            t.data[...] = teacher_adapters[k].data
    student = build_student(config.student_config(), config.seed, config.adapter_depth, teacher.hidden)
    trainer = Trainer(config, train, val, student, teacher, True)
    _resume(trainer, resume)
    trainer.run(on_epoch=on_epoch)
    return RunResult(student, teacher, trainer.log, trainer)


def pretrain_teacher(config: RunConfig, log_fn=None) -> Encoder:
    """Auxiliary phone-tagging pretraining of the teacher encoder, then freeze."""
    pc = config.pretrain
    gen = GeneratorConfig(**{**config.generator.__dict__, "seed": pc.seed})
    aux = generate_aux(gen, pc.aux_examples, prefix=f"aux{pc.seed}") if pc.steps > 0 else []
    return pretrain_teacher_encoder(config.teacher_config(), aux, pc.steps, batch_size=pc.batch_size, lr=pc.lr,
                                    seed=pc.seed, num_tags=gen.num_phones, context=config.context,
                                    recon_weight=pc.recon_weight,
                                    phone_means=gen.inventory()[0] if pc.residual_target else None, log=log_fn)


def evaluate(bundle: ModelBundle, dataset, context: int = 3) -> dict[str, tuple[float, float]]:
    """Per-invocation (EER, threshold)."""
    scores, labels, invs = score_dataset(bundle, list(dataset), context)
    return {inv.name: eer(s) for inv, s in per_invocation(scores, labels, invs).items()}


def write_metrics(path, records: Sequence[EpochRecord]) -> None:
    Path(path).write_text(metrics_csv(records), encoding="utf-8")
