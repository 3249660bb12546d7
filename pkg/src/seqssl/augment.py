"""Sequence augmentations: identity, random permutation, and segment masking.

Masking replaces events with the sentinel id K+1 (embedding row K) and,
optionally, timestamps with the sentinel value -1, which lies outside the
valid [0, 1] range by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EventSequence

MASKED_TIME = -1.0
TAGS = ("identity", "permute", "segment-mask", "twin")


@dataclass
class AugmentedView:
    """An augmented sequence plus the sorted set of masked positions."""

    seq: EventSequence
    masked_positions: np.ndarray
    tag: str

    def __post_init__(self):
        self.masked_positions = np.asarray(self.masked_positions, dtype=np.int64)
        if self.tag not in TAGS:
            raise ValueError(f"unknown augmentation tag {self.tag!r}")
        m = self.masked_positions
        if m.size:
            if m.min() < 0 or m.max() >= len(self.seq):
                raise ValueError("masked positions out of range")
            if np.any(np.diff(m) <= 0):
                raise ValueError("masked positions must be sorted and unique")


def identity(seq: EventSequence) -> AugmentedView:
    """The no-op augmentation: the view is the input itself."""
    return AugmentedView(seq=seq.copy(), masked_positions=np.empty(0, np.int64), tag="identity")


def random_permute(seq: EventSequence, rng: np.random.Generator) -> AugmentedView:
    """Jointly permute (event, time) pairs by one uniform permutation."""
    perm = rng.permutation(len(seq))
    return AugmentedView(
        seq=EventSequence(seq.events[perm], seq.times[perm], validate=False),
        masked_positions=np.empty(0, np.int64),
        tag="permute",
    )


def _draw_mask(
    length: int, rng: np.random.Generator, mask_ratio: float, mean_segment_len: float
) -> np.ndarray:
    """Mark ceil(mask_ratio * length) positions in non-overlapping contiguous
    segments with geometric lengths (mean mean_segment_len); segments start at
    a uniformly drawn unmasked position and stop early at collisions or the
    sequence end, so the target count is always reached exactly."""
    target = math.ceil(mask_ratio * length)
    masked = np.zeros(length, dtype=bool)
    covered = 0
    while covered < target:
        seg = min(int(rng.geometric(1.0 / mean_segment_len)), target - covered)
        candidates = np.flatnonzero(~masked)
        start = int(candidates[rng.integers(candidates.size)])
        for i in range(start, min(start + seg, length)):
            if masked[i]:
                break
            masked[i] = True
            covered += 1
    return masked


def segment_mask(
    seq: EventSequence,
    rng: np.random.Generator,
    k: int,
    mask_ratio: float = 0.15,
    mean_segment_len: float = 5.0,
    mask_times: bool = False,
    tag: str = "segment-mask",
) -> AugmentedView:
    """Mask contiguous segments: events become the sentinel id K+1 and,
    if mask_times, timestamps become -1. mask_ratio 0 is the degenerate
    no-masking hook used by tests and by twin view controls."""
    if not 0 <= mask_ratio < 1:
        raise ValueError("mask_ratio must lie in [0, 1)")
    if mean_segment_len < 1:
        raise ValueError("mean_segment_len must be >= 1")
    masked = _draw_mask(len(seq), rng, mask_ratio, mean_segment_len)
    events = seq.events.copy()
    times = seq.times.copy()
    events[masked] = k + 1
    if mask_times:
        times[masked] = MASKED_TIME
    return AugmentedView(
        seq=EventSequence(events, times, validate=False),
        masked_positions=np.flatnonzero(masked),
        tag=tag,
    )


def twin_views(
    seq: EventSequence,
    rng: np.random.Generator,
    k: int,
    mask_ratio: float = 0.15,
    mean_segment_len: float = 5.0,
    mask_times: bool = True,
) -> tuple[AugmentedView, AugmentedView]:
    """Two independently masked views of the same base sequence."""
    first = segment_mask(seq, rng, k, mask_ratio, mean_segment_len, mask_times, tag="twin")
    second = segment_mask(seq, rng, k, mask_ratio, mean_segment_len, mask_times, tag="twin")
    return first, second
