"""
CTC on lattices small enough to enumerate
=========================================

The forward recursion sums over every alignment without listing them.
On a 2-3 frame lattice we can list them and compare.
"""

import itertools

import numpy as np

from gfcn import ctc

# Two frames, classes {a, blank}, each 0.5.  Label "a".
lp = np.log(np.full((2, 2), 0.5))
print("loss", ctc.ctc_loss(lp, [0]), "expected", -np.log(0.75))

# Which paths count?  (a,a), (a,-), (-,a).  Not (-,-).
blank = 1
for path in itertools.product(range(2), repeat=2):
    merged = [k for k, _ in itertools.groupby(path) if k != blank]
    print(path, "->", merged)

# A random 6-frame lattice over 4 classes (blank last).
rng = np.random.default_rng(0)
z = rng.normal(size=(6, 4))
lp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
label = [0, 2, 2]
print("recursion ", ctc.ctc_loss(lp, label))
print("enumerated", ctc.brute_force_ctc(lp, label))

# Gradient w.r.t. the log-probs is minus the state occupancy per class.
loss, grad = ctc.ctc_loss_and_gradient(lp, label)
print(np.round(-grad, 3))
print("rows sum to", -grad.sum(axis=1))

# Repeats need a blank in between: "a a" needs 3 frames, not 2.
print(ctc.required_frames([0, 0]))
try:
    ctc.ctc_loss(lp[:2], [0, 0])
except ctc.InfeasibleAlignmentError as exc:
    print(exc)

# Greedy decoding: argmax, merge runs, drop blanks.
frames = np.full((5, 4), -9.0)
frames[np.arange(5), [0, 0, 3, 0, 1]] = 0.0
print(ctc.greedy_decode(frames, "abc"))
