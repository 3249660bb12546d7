"""
Input augmentations: permutation, segment masking, twin views
=============================================================

Pretext tasks corrupt the input sequence in controlled ways. Histogram
targets are permutation-invariant, so a random joint permutation of
(event, time) pairs makes a cheap hard positive; segment masking hides
contiguous runs and replaces events with the mask sentinel K+1; twin
views are two independent maskings of the same sequence for the
redundancy-reduction objective.
"""

import numpy as np

from seqssl.augment import random_permute, segment_mask, twin_views
from seqssl.data import EventSequence

K = 4
seq = EventSequence(
    events=[1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4],
    times=np.linspace(0.0, 1.0, 16),
)
rng = np.random.default_rng(5)

print("original events: ", seq.events.tolist())

# --- permutation keeps the multiset, changes the order -----------------
view = random_permute(seq, rng)
print("permuted events: ", view.seq.events.tolist())
print("same histogram:  ", sorted(view.seq.events.tolist()) == sorted(seq.events.tolist()))

# --- segment masking hides contiguous runs -----------------------------
masked = segment_mask(seq, rng, k=K, mask_ratio=0.25, mean_segment_len=3.0)
print("\nmasked events:   ", masked.seq.events.tolist(), "(sentinel =", K + 1, ")")
print("masked positions:", masked.masked_positions.tolist())

# masking a quarter of 16 events hides exactly ceil(0.25 * 16) = 4
print("hidden count:    ", len(masked.masked_positions))

# --- twin views are two independent corruptions ------------------------
a, b = twin_views(seq, rng, k=K, mask_ratio=0.25)
print("\ntwin A positions:", a.masked_positions.tolist())
print("twin B positions:", b.masked_positions.tolist())
print("twins also mask timestamps: A times", np.round(a.seq.times[a.masked_positions], 2).tolist())
