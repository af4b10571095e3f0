#!/usr/bin/env python3
# Baseline student versus adaptive distillation on the desk presets, one seed.
# Takes a few minutes on one core; akd.experiment runs the full comparison.

import logging

from akd.config import desk_config
from akd.experiment import FULL_ROW, seed_data
from akd.pipelines import distill_adaptive, evaluate, pretrain_teacher, train_baseline

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = desk_config(epochs=15, data={"n_train": 1200, "n_test": 1200})
train, val, test = seed_data(cfg, seed=0)

# the teacher encoder is pretrained on an auxiliary frame task, then frozen
encoder = pretrain_teacher(cfg)

base = train_baseline(cfg, train, val)
akd = distill_adaptive(cfg.with_(pipeline="adaptive_kd", losses=FULL_ROW), encoder, train, val)

print("invocation  baseline   aKD student   aKD teacher")
b, s, t = (evaluate(m, test, cfg.context) for m in (base.student, akd.student, akd.teacher))
for inv in b:
    print(f"{inv:<10}  {b[inv][0]:.4f}     {s[inv][0]:.4f}        {t[inv][0]:.4f}")
