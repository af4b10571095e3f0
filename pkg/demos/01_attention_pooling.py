#!/usr/bin/env python3
# Global attention pooling on a padded batch, and its gradient.

import numpy as np

from akd.heads import init_adapters, route
from akd.tensor import Tensor, backward, sum as tsum

rng = np.random.default_rng(0)

# two utterances, the second one two frames shorter
e = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
invocations = np.array([0, 2])  # HAG, FCO

adapters = init_adapters(4, rng)
out = route(e, mask, invocations, adapters)

# padded frames get exactly zero weight
print("attention weights\n", np.round(out.alpha.data, 3))
print("device-directed probability", np.round(out.scores, 3))

# only the adapters of the invocation types present receive gradient
# (sum the positive-class column: each row of p sums to one, so sum(p) is constant)
backward(tsum(out.p * Tensor(np.array([[0.0, 1.0]]))))
for name in ("HAG.theta", "AG.theta", "FCO.theta"):
    g = adapters[name].grad
    print(name, "gradient norm", 0.0 if g is None else float(np.linalg.norm(g)))
