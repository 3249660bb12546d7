"""Event-sequence data model, ingestion, labeling, diagnostics, and a synthetic corpus.

A user history is a sequence of (event type, normalized timestamp) pairs plus a
binary purchase label derived from a held-out time window. Event types are
1-based integers in [1..K]; timestamps live in [0, 1] after per-history
min-max normalization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

TAOBAO_EVENT_TYPES = {"pv": 1, "cart": 2, "fav": 3, "buy": 4}
TAOBAO_PURCHASE_EVENT = 4
CORPUS_FORMAT = "seqssl-corpus"
CORPUS_VERSION = 1


class EventSequence:
    """Ordered events with aligned normalized timestamps.

    Augmented views may carry mask sentinels (event id K+1, time -1) or
    permuted times; those are built with validate=False.
    """

    __slots__ = ("events", "times")

    def __init__(self, events, times, validate: bool = True):
        self.events = np.ascontiguousarray(events, dtype=np.int64)
        self.times = np.ascontiguousarray(times, dtype=np.float64)
        if validate:
            self._validate()

    def _validate(self) -> None:
        if self.events.ndim != 1 or self.times.ndim != 1:
            raise ValueError("events and times must be 1-D")
        if self.events.size != self.times.size:
            raise ValueError(
                f"events length {self.events.size} != times length {self.times.size}"
            )
        if self.events.size < 1:
            raise ValueError("sequence must contain at least one event")
        if self.events.min() < 1:
            raise ValueError("event types must be >= 1")
        if self.times.min() < 0.0 or self.times.max() > 1.0:
            raise ValueError("times must lie in [0, 1]")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("times must be non-decreasing")

    def __len__(self) -> int:
        return int(self.events.size)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EventSequence)
            and np.array_equal(self.events, other.events)
            and np.array_equal(self.times, other.times)
        )

    def __repr__(self) -> str:
        return f"EventSequence(len={len(self)})"

    def copy(self) -> "EventSequence":
        return EventSequence(self.events.copy(), self.times.copy(), validate=False)


@dataclass
class LabeledExample:
    """A user history plus the binary label for the held-out window."""

    history: EventSequence
    label: int
    ref_time: float = 0.0
    user_id: int = 0
    archetype: int | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Histogram:
    """Normalized event-type frequencies on the (K-1)-simplex."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError("probs must be 1-D")
        if self.probs.min() < 0:
            raise ValueError("probs must be non-negative")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probs must sum to 1, got {self.probs.sum()!r}")


@dataclass
class DatasetSplit:
    """Contiguous time-ordered train/val/test partition."""

    train: list[LabeledExample]
    val: list[LabeledExample]
    test: list[LabeledExample]
    fractions: tuple[float, float, float]
    mode: str = "time"

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


@dataclass
class DistributionDiagnostics:
    """Corpus-level summary statistics.

    ppl is the effective number of equally likely event types,
    2 ** entropy(p) with base-2 entropy; gini_simpson is the probability
    that two independent event draws differ, 1 - sum(p^2).
    """

    ppl: float
    gini_simpson: float
    label_mean: float
    size: int
    seq_length: float

    def as_keyvalues(self) -> str:
        return "\n".join(
            [
                f"ppl={self.ppl:.6f}",
                f"gini_simpson={self.gini_simpson:.6f}",
                f"label_mean={self.label_mean:.6f}",
                f"size={self.size}",
                f"seq_length={self.seq_length:.6f}",
            ]
        )

    def as_text(self) -> str:
        return (
            f"examples:            {self.size}\n"
            f"mean history length: {self.seq_length:.2f}\n"
            f"event perplexity:    {self.ppl:.4f}\n"
            f"gini-simpson index:  {self.gini_simpson:.4f}\n"
            f"positive label rate: {self.label_mean:.4f}"
        )


@dataclass
class IngestStats:
    """Row/user accounting for one ingestion run."""

    rows_total: int = 0
    rows_rejected: int = 0
    users_total: int = 0
    users_dropped: int = 0


@dataclass
class ArchetypeSpec:
    """Generative spec: per-archetype event distributions plus a shared
    logistic purchase propensity over the archetype's event distribution."""

    event_probs: np.ndarray
    logit_weights: np.ndarray
    logit_bias: float
    mixture: np.ndarray | None = None

    def __post_init__(self):
        self.event_probs = np.asarray(self.event_probs, dtype=np.float64)
        self.logit_weights = np.asarray(self.logit_weights, dtype=np.float64)
        if self.event_probs.ndim != 2:
            raise ValueError("event_probs must be (archetypes, K)")
        if self.event_probs.shape[0] < 1:
            raise ValueError("at least one archetype required")
        if self.event_probs.min() < 0:
            raise ValueError("archetype event probabilities must be non-negative")
        if np.any(np.abs(self.event_probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each archetype distribution must sum to 1")
        if self.logit_weights.shape != (self.event_probs.shape[1],):
            raise ValueError("logit_weights must have one entry per event type")
        if self.mixture is None:
            n = self.event_probs.shape[0]
            self.mixture = np.full(n, 1.0 / n)
        else:
            self.mixture = np.asarray(self.mixture, dtype=np.float64)

    @property
    def n_archetypes(self) -> int:
        return int(self.event_probs.shape[0])

    @property
    def k(self) -> int:
        return int(self.event_probs.shape[1])

    def propensities(self) -> np.ndarray:
        """Purchase probability per archetype (constant within an archetype)."""
        logits = self.event_probs @ self.logit_weights + self.logit_bias
        return 1.0 / (1.0 + np.exp(-logits))


def default_archetype_spec(k: int = 6) -> ArchetypeSpec:
    """Two archetypes with disjoint dominant event types and a propensity gap
    wide enough that counting events is highly predictive of the label."""
    if k < 4:
        raise ValueError("default spec needs K >= 4")
    a = np.full(k, 0.05)
    b = np.full(k, 0.05)
    a[0] = a[1] = 0.35
    a[2] = a[3] = 0.10
    b[0] = b[1] = 0.10
    b[2] = b[3] = 0.35
    a /= a.sum()
    b /= b.sum()
    w = np.zeros(k)
    w[0] = w[1] = 8.0
    w[2] = w[3] = -8.0
    return ArchetypeSpec(
        event_probs=np.stack([a, b]), logit_weights=w, logit_bias=-2.4
    )


def empirical_histogram(seq: EventSequence, k: int) -> Histogram:
    """Fraction of the sequence occupied by each event type in [1..K]."""
    events = seq.events
    if events.size == 0:
        raise ValueError("cannot build a histogram from an empty sequence")
    if events.min() < 1 or events.max() > k:
        raise ValueError(f"event ids must lie in [1..{k}]")
    counts = np.bincount(events, minlength=k + 1)[1:]
    return Histogram(counts / events.size)


def diagnostics(examples: list[LabeledExample]) -> DistributionDiagnostics:
    """Corpus-level event-distribution statistics plus the label rate."""
    if not examples:
        raise ValueError("diagnostics needs at least one example")
    all_events = np.concatenate([ex.history.events for ex in examples])
    counts = np.bincount(all_events)[1:]
    p = counts / counts.sum()
    nz = p[p > 0]
    ppl = float(2.0 ** -(nz * np.log2(nz)).sum())
    gs = float(1.0 - (p * p).sum())
    return DistributionDiagnostics(
        ppl=ppl,
        gini_simpson=gs,
        label_mean=float(np.mean([ex.label for ex in examples])),
        size=len(examples),
        seq_length=float(np.mean([len(ex.history) for ex in examples])),
    )


def time_split(
    examples: list[LabeledExample], fractions: tuple[float, float, float]
) -> DatasetSplit:
    """Sort by (ref_time, user_id) and cut contiguously at the cumulative
    fraction boundaries (floor), so identical inputs in any order split
    identically."""
    if len(examples) < 3:
        raise ValueError("need at least 3 examples to split")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    ordered = sorted(examples, key=lambda ex: (ex.ref_time, ex.user_id))
    n = len(ordered)
    # epsilon absorbs float error in cumulative sums like 0.7 + 0.2
    b1 = int(np.floor(n * fractions[0] + 1e-9))
    b2 = int(np.floor(n * (fractions[0] + fractions[1]) + 1e-9))
    return DatasetSplit(
        train=ordered[:b1],
        val=ordered[b1:b2],
        test=ordered[b2:],
        fractions=tuple(fractions),
    )


def ingest_taobao(
    csv_path,
    event_type_map: dict[str, int] | None = None,
    max_len: int = 100,
    purchase_event_id: int = TAOBAO_PURCHASE_EVENT,
    label_window_fraction: float = 0.125,
    stats: IngestStats | None = None,
) -> list[LabeledExample]:
    """Build labeled examples from a UserBehavior-format CSV.

    Rows are (user_id, item_id, category_id, behavior_type, timestamp) with
    no header. The corpus time range is cut once at the
    (1 - label_window_fraction) point; events before the cut form the
    history (most recent max_len kept, timestamps min-max normalized within
    the kept window) and the label is 1 iff the purchase event occurs at or
    after the cut. Unmapped behavior strings are rejected and counted; users
    with an empty history are dropped and counted.
    """
    if event_type_map is None:
        event_type_map = TAOBAO_EVENT_TYPES
    if stats is None:
        stats = IngestStats()
    if not 0 < label_window_fraction < 1:
        raise ValueError("label_window_fraction must lie in (0, 1)")

    per_user: dict[int, list[tuple[int, int]]] = {}
    t_min, t_max = None, None
    with open(csv_path, newline="") as fh:
        for row in csv.reader(fh):
            stats.rows_total += 1
            if len(row) != 5:
                stats.rows_rejected += 1
                continue
            behavior = row[3].strip()
            if behavior not in event_type_map:
                stats.rows_rejected += 1
                continue
            try:
                user = int(row[0])
                ts = int(row[4])
            except ValueError:
                stats.rows_rejected += 1
                continue
            per_user.setdefault(user, []).append((ts, event_type_map[behavior]))
            t_min = ts if t_min is None else min(t_min, ts)
            t_max = ts if t_max is None else max(t_max, ts)

    if not per_user:
        return []
    cut = t_min + (1.0 - label_window_fraction) * (t_max - t_min)

    examples: list[LabeledExample] = []
    for user in sorted(per_user):
        stats.users_total += 1
        rows = sorted(per_user[user], key=lambda r: r[0])
        history = [(ts, e) for ts, e in rows if ts < cut]
        window = [e for ts, e in rows if ts >= cut]
        if not history:
            stats.users_dropped += 1
            continue
        history = history[-max_len:]
        raw_ts = np.array([ts for ts, _ in history], dtype=np.float64)
        events = np.array([e for _, e in history], dtype=np.int64)
        span = raw_ts[-1] - raw_ts[0]
        times = (raw_ts - raw_ts[0]) / span if span > 0 else np.zeros_like(raw_ts)
        examples.append(
            LabeledExample(
                history=EventSequence(events, times),
                label=int(any(e == purchase_event_id for e in window)),
                ref_time=float(raw_ts[-1]),
                user_id=user,
            )
        )
    return examples


def gen_synthetic(
    seed: int,
    n_users: int = 20000,
    k: int = 6,
    max_len: int = 50,
    spec: ArchetypeSpec | None = None,
    min_len: int = 10,
) -> list[LabeledExample]:
    """Sample labeled histories from archetype event distributions.

    Each user draws an archetype from the mixture, iid events from that
    archetype's distribution, sorted uniform timestamps, and a Bernoulli
    label with the archetype's logistic propensity. Deterministic given
    seed; the drawn archetype is recorded per example for audit.
    """
    if spec is None:
        spec = default_archetype_spec(k)
    if spec.k != k:
        raise ValueError(f"spec has K={spec.k}, requested K={k}")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")

    rng = np.random.default_rng(seed)
    propensity = spec.propensities()
    arch = rng.choice(spec.n_archetypes, size=n_users, p=spec.mixture)
    lengths = rng.integers(min_len, max_len + 1, size=n_users)
    ref_times = rng.random(n_users)
    examples: list[LabeledExample] = []
    for u in range(n_users):
        a = int(arch[u])
        length = int(lengths[u])
        events = rng.choice(np.arange(1, k + 1), size=length, p=spec.event_probs[a])
        times = np.sort(rng.random(length))
        label = int(rng.random() < propensity[a])
        examples.append(
            LabeledExample(
                history=EventSequence(events, times),
                label=label,
                ref_time=float(ref_times[u]),
                user_id=u,
                archetype=a,
            )
        )
    return examples


def save_corpus(path, examples: list[LabeledExample], k: int) -> None:
    """Write a corpus as JSON lines with a version-tagged header line."""
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "k": int(k),
        "count": len(examples),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ex in examples:
            record = {
                "user_id": ex.user_id,
                "events": ex.history.events.tolist(),
                "times": ex.history.times.tolist(),
                "label": ex.label,
                "ref_time": ex.ref_time,
            }
            if ex.archetype is not None:
                record["archetype"] = ex.archetype
            fh.write(json.dumps(record) + "\n")


def load_corpus(path) -> tuple[list[LabeledExample], int]:
    """Read a corpus written by save_corpus; rejects unknown format/version."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"not a corpus file: {path}")
        if header.get("version") != CORPUS_VERSION:
            raise ValueError(f"unsupported corpus version {header.get('version')!r}")
        examples = []
        for line in fh:
            rec = json.loads(line)
            examples.append(
                LabeledExample(
                    history=EventSequence(rec["events"], rec["times"]),
                    label=rec["label"],
                    ref_time=rec["ref_time"],
                    user_id=rec["user_id"],
                    archetype=rec.get("archetype"),
                )
            )
    if len(examples) != header["count"]:
        raise ValueError(
            f"corpus truncated: header says {header['count']}, found {len(examples)}"
        )
    return examples, int(header["k"])
