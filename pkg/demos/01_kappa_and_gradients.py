"""
Agreement and gradients
=======================

Quadratic weighted kappa on a small rating table, then a finite-difference
check of the tape's gradient for a softmax cross-entropy.
"""

import numpy as np

from longscore import autograd as ag
from longscore.metrics import RatingTable, build_matrices, quadratic_weighted_kappa

# two raters scoring four essays on a 1..3 scale
human = [1, 1, 2, 3]
model = [1, 2, 2, 3]
m = build_matrices(RatingTable.from_columns(human, model, (1, 3)))
print("observed proportions\n", m.observed)
print("kappa", quadratic_weighted_kappa(human, model, (1, 3)))

# a rater who always answers the same score agrees only by chance
print("constant rater", quadratic_weighted_kappa([1, 2, 3, 2], [2, 2, 2, 2], (1, 3)))

# reverse mode versus central differences
rng = np.random.default_rng(0)
logits = rng.normal(size=(3, 4))
labels = [0, 3, 1]

with ag.Tape() as tape:
    x = ag.parameter(logits)
    loss = ag.cross_entropy(x, labels)
    ag.backward(loss, tape)


def f(z):
    with ag.Tape():
        return ag.cross_entropy(ag.Tensor(z), labels).item()


h = 1e-6
numeric = np.zeros_like(logits)
for idx in np.ndindex(logits.shape):
    up, down = logits.copy(), logits.copy()
    up[idx] += h
    down[idx] -= h
    numeric[idx] = (f(up) - f(down)) / (2 * h)
print("max gradient gap", np.abs(x.grad - numeric).max())
