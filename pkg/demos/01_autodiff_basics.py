"""
Reverse-mode autodiff on a tape: gradients, checks, and AdamW
=============================================================

The numeric core records primitive operations on a tape during the
forward pass and replays it backwards to accumulate gradients into
named parameters. This script differentiates a softmax cross-entropy
by hand, verifies it against central finite differences, and minimizes
a quadratic with the AdamW optimizer.
"""

import numpy as np

import seqssl.numcore as nc

# --- a parameter, a forward pass, a backward pass ---------------------
rng = np.random.default_rng(0)
logits = nc.Param("logits", rng.normal(size=(2, 5)))
target = np.zeros((2, 5))
target[0, 3] = target[1, 1] = 1.0  # one-hot rows

with nc.tape():
    # cross-entropy of softmax(logits) against the targets
    loss = nc.neg(nc.mean(nc.sum(nc.mul(target, nc.log_softmax(logits, axis=-1)), axis=-1)))
    nc.backward(loss)

# the classical identity: d loss / d logits = (softmax - target) / batch
softmax = np.exp(logits.values) / np.exp(logits.values).sum(-1, keepdims=True)
print("loss:", round(loss.item(), 6))
print("max |grad - (softmax - target)/B|:", np.abs(logits.grad - (softmax - target) / 2).max())

# --- the finite-difference oracle agrees ------------------------------
def rebuild():
    return nc.neg(nc.mean(nc.sum(nc.mul(target, nc.log_softmax(logits, axis=-1)), axis=-1)))

report = nc.grad_check(rebuild, [logits])
print("finite-difference max rel err:", f"{report.max_rel_err:.2e}")

# --- AdamW walks a quadratic to its minimum ---------------------------
w = nc.Param("w", np.array([5.0, -3.0]))
opt = nc.OptimizerState(lr=0.1, weight_decay=0.0)
for step in range(300):
    with nc.tape():
        residual = nc.sub(w, np.array([1.0, 2.0]))
        loss = nc.mean(nc.mul(residual, residual))
        nc.backward(loss)
    nc.adamw_step(opt, [w])
print("minimizer found:", np.round(w.values, 4), "(target [1. 2.])")
