"""The desk benchmark: teacher, baseline, conventional KD and adaptive KD over several seeds.

One teacher encoder is pretrained (it plays the role of the shared, general
pretrained model) and reused by every seed.  For each seed a fresh train/val
pool and a held-out test set are generated, then four models are trained and
scored per invocation type.  The report holds medians across seeds and the
three directional checks:

* teacher EER <= baseline EER (per invocation type);
* adaptive KD EER <= baseline EER on at least two invocation types;
* adaptive KD EER <= conventional KD EER on average over invocation types.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from akd.config import RunConfig, desk_config
from akd.data import INVOCATIONS, GeneratorConfig, generate, split_by_id
from akd.distill import DistillWeights
from akd.pipelines import (
    distill_adaptive,
    distill_conventional,
    evaluate,
    pretrain_teacher,
    train_baseline,
    train_teacher_adapters,
)

log = logging.getLogger(__name__)

FULL_ROW = "L_DDSD + L_PL + L_ED + L_AR"
MODELS = ("teacher", "baseline", "conventional_kd", "adaptive_kd")


@dataclass
class ExperimentReport:
    seeds: list[int]
    eers: dict[str, dict[str, list[float]]]  # model -> invocation -> per-seed EER
    seconds: float
    config: dict
    timings: dict[str, float] = field(default_factory=dict)

    def median(self, model: str) -> dict[str, float]:
        return {inv: float(np.median(v)) for inv, v in self.eers[model].items()}

    def checks(self) -> dict[str, bool]:
        t, b = self.median("teacher"), self.median("baseline")
        c, a = self.median("conventional_kd"), self.median("adaptive_kd")
        names = [inv.name for inv in INVOCATIONS]
        return {
            "teacher_le_baseline": all(t[n] <= b[n] for n in names),
            "akd_le_baseline_2of3": sum(a[n] <= b[n] for n in names) >= 2,
            "akd_le_conventional_mean": float(np.mean([a[n] for n in names])) <= float(np.mean([c[n] for n in names])),
        }

    def table(self) -> str:
        names = [inv.name for inv in INVOCATIONS]
        lines = ["model            " + "  ".join(f"{n:>7}" for n in names) + "     mean"]
        for m in MODELS:
            med = self.median(m)
            vals = [med[n] for n in names]
            lines.append(f"{m:<16} " + "  ".join(f"{v:7.4f}" for v in vals) + f"  {np.mean(vals):7.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "eers": self.eers,
            "medians": {m: self.median(m) for m in MODELS},
            "checks": self.checks(),
            "seconds": self.seconds,
            "timings": self.timings,
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def seed_data(config: RunConfig, seed: int):
    """Train/val split and test set for one seed; the two pools never share a generator stream."""
    pool = generate(GeneratorConfig(**{**config.generator.__dict__, "seed": 2 * seed + 1}),
                    config.data.n_train, prefix=f"tr{seed}")
    train, val = split_by_id(pool, config.data.val_fraction)
    test = generate(GeneratorConfig(**{**config.generator.__dict__, "seed": 2 * seed + 2}),
                    config.data.n_test, prefix=f"te{seed}")
    return train, val, test


def run_desk_experiment(seeds: Sequence[int] = (0, 1, 2), config: RunConfig | None = None,
                        out_dir=None) -> ExperimentReport:
    """Run the four-way comparison; ``config`` defaults to the desk preset with all four losses."""
    base = config if config is not None else desk_config(losses=FULL_ROW)
    full = base.weights if base.weights.uses_teacher else DistillWeights.from_row(FULL_ROW)
    start = time.perf_counter()
    timings: dict[str, float] = {}

    def timed(key, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - t0
        return out

    teacher_encoder = timed("pretrain", pretrain_teacher, base)
    eers = {m: {inv.name: [] for inv in INVOCATIONS} for m in MODELS}
    for seed in seeds:
        train, val, test = seed_data(base, seed)
        cfg = base.with_(seed=seed)
        results = {}
        results["baseline"] = timed("baseline", train_baseline, cfg.with_(pipeline="baseline",
                                                                         weights=DistillWeights()), train, val).student
        teacher = timed("teacher", train_teacher_adapters, cfg, teacher_encoder, train, val).teacher
        results["teacher"] = teacher
        kd = cfg.with_(weights=full)
        results["conventional_kd"] = timed("conventional_kd", distill_conventional,
                                           kd.with_(pipeline="conventional_kd"), teacher, train, val).student
        results["adaptive_kd"] = timed("adaptive_kd", distill_adaptive, kd.with_(pipeline="adaptive_kd"),
                                       teacher_encoder, train, val).student
        for m, bundle in results.items():
            for inv, (rate, _) in evaluate(bundle, test, cfg.context).items():
                eers[m][inv].append(rate)
        log.info("seed %d done after %.0fs: %s", seed, time.perf_counter() - start,
                 {m: [round(eers[m][i.name][-1], 4) for i in INVOCATIONS] for m in MODELS})
    report = ExperimentReport(list(seeds), eers, time.perf_counter() - start, base.to_dict(), timings)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "experiment.json")
    return report
