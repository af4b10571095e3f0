#!/usr/bin/env python3
# Equal error rate and DET points for two overlapping score distributions.

import numpy as np

from akd.metrics import ScoredSet, det_curve, eer, far_frr

rng = np.random.default_rng(3)
labels = np.r_[np.ones(500), np.zeros(500)]
scores = np.r_[rng.normal(1.0, 1.0, 500), rng.normal(-1.0, 1.0, 500)]
s = ScoredSet(scores, labels)

rate, threshold = eer(s)
print(f"EER {rate:.4f} at threshold {threshold:.4f}")
print("FAR/FRR there", far_frr(s, threshold))

# two unit-variance Gaussians two apart: the EER is Phi(-1), about 0.159
pts = det_curve(s)
print(f"{len(pts)} DET points, from {pts[0]} to {pts[-1]}")

# any strictly increasing transform of the scores leaves the EER unchanged
print("after exp():", eer(ScoredSet(np.exp(scores), labels))[0])
