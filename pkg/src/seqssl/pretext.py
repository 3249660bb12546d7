"""Pretraining objectives and the weighted multi-task combiner.

Tasks and their input augmentations:
  abacus    identity input, predict the sequence's event-type histogram
  abacus-r  randomly permuted input, same histogram target
  abacus-m  segment-masked input (events only), target from the uncorrupted
            sequence
  msm       segment-masked input (events and times), reconstruct masked
            events (cross-entropy) and timestamps (squared error)
  bt        twin independently masked views, Barlow Twins redundancy
            reduction on projected embeddings
  nep       encode a random prefix, predict the next event
  nkehp     encode a random prefix, predict the histogram of the next
            k_future events

Histogram targets always come from the original uncorrupted sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .augment import AugmentedView, identity, random_permute, segment_mask, twin_views
from .data import EventSequence, LabeledExample, empirical_histogram
from .encoders import EncoderConfig, encode, pad_views

PRETEXT_TASKS = ("abacus", "abacus-r", "abacus-m", "msm", "bt", "nep", "nkehp")
BT_PROJECTION_DIM = 32
HEAD_HIDDEN_DIM = 16


@dataclass
class TaskHead:
    """Two-layer MLP with tanh hidden activation."""

    tag: str
    w1: nc.Param
    b1: nc.Param
    w2: nc.Param
    b2: nc.Param

    def params(self) -> list[nc.Param]:
        return [self.w1, self.b1, self.w2, self.b2]

    def apply(self, x: nc.Tensor) -> nc.Tensor:
        hidden = nc.tanh(nc.add(nc.matmul(x, self.w1), self.b1))
        return nc.add(nc.matmul(hidden, self.w2), self.b2)


def make_head(
    tag: str, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = HEAD_HIDDEN_DIM
) -> TaskHead:
    def xavier(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return TaskHead(
        tag=tag,
        w1=nc.Param(f"head_{tag}_w1", xavier(in_dim, hidden)),
        b1=nc.Param(f"head_{tag}_b1", np.zeros(hidden)),
        w2=nc.Param(f"head_{tag}_w2", xavier(hidden, out_dim)),
        b2=nc.Param(f"head_{tag}_b2", np.zeros(out_dim)),
    )


def head_from_arrays(tag: str, arrays: dict[str, np.ndarray]) -> TaskHead:
    """Rebuild a head from checkpoint arrays named head_<tag>_{w1,b1,w2,b2}."""
    def param(suffix):
        name = f"head_{tag}_{suffix}"
        if name not in arrays:
            raise ValueError(f"checkpoint is missing head parameter {name!r}")
        return nc.Param(name, arrays[name].copy())

    return TaskHead(tag=tag, w1=param("w1"), b1=param("b1"), w2=param("w2"), b2=param("b2"))


def head_output_dim(task: str, k: int) -> int:
    if task in ("abacus", "abacus-r", "abacus-m", "nep", "nkehp"):
        return k
    if task == "msm":
        return k + 1  # K event logits plus one timestamp regression output
    if task == "bt":
        return BT_PROJECTION_DIM
    raise ValueError(f"unknown task {task!r}")


def make_task_heads(
    tasks: list[str], config: EncoderConfig, rng: np.random.Generator
) -> dict[str, TaskHead]:
    heads = {}
    for task in tasks:
        hidden = BT_PROJECTION_DIM if task == "bt" else HEAD_HIDDEN_DIM
        heads[task] = make_head(
            task, config.hidden_dim, head_output_dim(task, config.k), rng, hidden=hidden
        )
    return heads


@dataclass
class MTLWeights:
    """Fixed convex task weights: w^t >= 0, sum to 1."""

    weights: dict[str, float]

    def __post_init__(self):
        for task, w in self.weights.items():
            if w < 0:
                raise ValueError(f"negative weight for task {task!r}")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"task weights must sum to 1, got {total!r}")


def _histogram_targets(examples: list[LabeledExample], k: int) -> np.ndarray:
    return np.stack([empirical_histogram(ex.history, k).probs for ex in examples])


def _check_simplex(targets: np.ndarray, tol: float = 1e-6) -> None:
    if targets.min() < -tol or np.any(np.abs(targets.sum(axis=-1) - 1.0) > tol):
        raise ValueError("histogram targets must lie on the probability simplex")


def _histogram_ce(h: nc.Tensor, targets: np.ndarray, head: TaskHead) -> nc.Tensor:
    logp = nc.log_softmax(head.apply(h), axis=-1)
    return nc.neg(nc.mean(nc.sum(nc.mul(targets, logp), axis=1)))


def loss_abacus(h: nc.Tensor, targets: np.ndarray, head: TaskHead) -> nc.Tensor:
    """Mean cross-entropy between target histograms and predicted softmax."""
    targets = np.asarray(targets, dtype=np.float64)
    _check_simplex(targets)
    return _histogram_ce(h, targets, head)


def loss_nkehp(h: nc.Tensor, targets: np.ndarray, head: TaskHead) -> nc.Tensor:
    """Cross-entropy against the next-window histogram (same form as abacus)."""
    targets = np.asarray(targets, dtype=np.float64)
    _check_simplex(targets)
    return _histogram_ce(h, targets, head)


def loss_nep(h: nc.Tensor, target_events: np.ndarray, head: TaskHead) -> nc.Tensor:
    """Mean cross-entropy of the next-event prediction."""
    targets = np.asarray(target_events, dtype=np.int64)
    logp = nc.log_softmax(head.apply(h), axis=-1)
    picked = nc.take(logp, (np.arange(targets.size), targets - 1))
    return nc.neg(nc.mean(picked))


def loss_msm(
    masked_states: nc.Tensor,
    target_events: np.ndarray,
    target_times: np.ndarray,
    head: TaskHead,
    lam: float = 1.0,
) -> nc.Tensor:
    """Masked-position reconstruction: event CE plus lam * timestamp MSE,
    both averaged over all masked positions pooled across the batch."""
    target_events = np.asarray(target_events, dtype=np.int64)
    target_times = np.asarray(target_times, dtype=np.float64)
    if target_events.size == 0:
        raise ValueError("MSM needs at least one masked position in the batch")
    k = head.w2.shape[1] - 1
    out = head.apply(masked_states)
    event_logits = nc.take(out, (slice(None), slice(0, k)))
    tau_hat = nc.take(out, (slice(None), k))
    logp = nc.log_softmax(event_logits, axis=-1)
    ce = nc.neg(nc.mean(nc.take(logp, (np.arange(target_events.size), target_events - 1))))
    err = nc.sub(tau_hat, target_times)
    return nc.add(ce, nc.mul(lam, nc.mean(nc.mul(err, err))))


def loss_bt(z: nc.Tensor, z_prime: nc.Tensor, lam: float = 1.0) -> nc.Tensor:
    """Barlow Twins: per-dimension batch standardization, cross-correlation
    C_ij = <z_i, z'_j> / (||z_i|| ||z'_j||), then
    sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    if z.shape[0] < 2:
        raise ValueError("Barlow Twins needs batch size >= 2")
    if z.shape != z_prime.shape:
        raise nc.ShapeError("loss_bt", "twin batches must match", z.shape, z_prime.shape)
    zs = nc.standardize(z, axis=0)
    zps = nc.standardize(z_prime, axis=0)
    num = nc.matmul(nc.swapaxes(zs, 0, 1), zps)
    n1 = nc.sqrt(nc.sum(nc.mul(zs, zs), axis=0))
    n2 = nc.sqrt(nc.sum(nc.mul(zps, zps), axis=0))
    denom = nc.mul(nc.reshape(n1, (z.shape[1], 1)), nc.reshape(n2, (1, z.shape[1])))
    corr = nc.div(num, denom)
    dim = z.shape[1]
    diag = nc.take(corr, (np.arange(dim), np.arange(dim)))
    one_minus = nc.sub(1.0, diag)
    invariance = nc.sum(nc.mul(one_minus, one_minus))
    off_diag = nc.sub(nc.sum(nc.mul(corr, corr)), nc.sum(nc.mul(diag, diag)))
    return nc.add(invariance, nc.mul(lam, off_diag))


def mtl_loss(losses: dict[str, nc.Tensor], weights: MTLWeights) -> nc.Tensor:
    """Weighted sum of task losses; every weighted task must be present."""
    total = None
    for task, w in weights.weights.items():
        if task not in losses:
            raise ValueError(f"weight given for absent task {task!r}")
        term = nc.mul(w, losses[task])
        total = term if total is None else nc.add(total, term)
    if total is None:
        raise ValueError("no tasks to combine")
    return total


def nep_split(
    seq: EventSequence, rng: np.random.Generator
) -> tuple[EventSequence, int] | None:
    """Split at a uniform s in [1, l-1]; returns (prefix, next event) or
    None when l = 1."""
    length = len(seq)
    if length < 2:
        return None
    s = int(rng.integers(1, length))
    prefix = EventSequence(seq.events[:s], seq.times[:s], validate=False)
    return prefix, int(seq.events[s])


def nkehp_split(
    seq: EventSequence, rng: np.random.Generator, k: int, k_future: int = 10
) -> tuple[EventSequence, np.ndarray] | None:
    """Split at a uniform s with k_future events after it; the target is the
    histogram of events s+1 .. s+k_future. None when the sequence is too
    short."""
    length = len(seq)
    if length < k_future + 1:
        return None
    s = int(rng.integers(1, length - k_future + 1))
    prefix = EventSequence(seq.events[:s], seq.times[:s], validate=False)
    window = EventSequence(
        seq.events[s : s + k_future], seq.times[s : s + k_future], validate=False
    )
    return prefix, empirical_histogram(window, k).probs


def gather_masked_states(
    states: nc.Tensor,
    views: list[AugmentedView],
    originals: list[LabeledExample],
) -> tuple[nc.Tensor, np.ndarray, np.ndarray]:
    """Select per-position encoder states at every masked position (pooled
    over the batch) along with the uncorrupted target events and times."""
    batch_idx, pos_idx, events, times = [], [], [], []
    for b, (view, example) in enumerate(zip(views, originals)):
        seq = example.history
        for pos in view.masked_positions:
            batch_idx.append(b)
            pos_idx.append(int(pos))
            events.append(int(seq.events[pos]))
            times.append(float(seq.times[pos]))
    if not batch_idx:
        raise ValueError("no masked positions in the batch")
    selected = nc.take(states, (np.array(batch_idx), np.array(pos_idx)))
    return selected, np.array(events, dtype=np.int64), np.array(times, dtype=np.float64)


def compute_task_loss(
    task: str,
    params: dict[str, nc.Param],
    config: EncoderConfig,
    heads: dict[str, TaskHead],
    examples: list[LabeledExample],
    rng: np.random.Generator,
    mask_ratio: float = 0.15,
    mean_segment_len: float = 5.0,
    k_future: int = 10,
    msm_lambda: float = 1.0,
    bt_lambda: float = 1.0,
) -> nc.Tensor:
    """Apply the task's augmentation to the batch, encode, and compute its
    loss. Tasks that skip short sequences (nep, nkehp) raise if nothing in
    the batch qualifies."""
    if task not in PRETEXT_TASKS:
        raise ValueError(f"unknown task {task!r}")
    k = config.k

    if task in ("abacus", "abacus-r", "abacus-m"):
        if task == "abacus":
            views = [identity(ex.history) for ex in examples]
        elif task == "abacus-r":
            views = [random_permute(ex.history, rng) for ex in examples]
        else:
            views = [
                segment_mask(ex.history, rng, k, mask_ratio, mean_segment_len, mask_times=False)
                for ex in examples
            ]
        h, _ = encode(params, config, pad_views(views, k))
        return loss_abacus(h, _histogram_targets(examples, k), heads[task])

    if task == "msm":
        views = [
            segment_mask(ex.history, rng, k, mask_ratio, mean_segment_len, mask_times=True)
            for ex in examples
        ]
        _, states = encode(params, config, pad_views(views, k))
        selected, events, times = gather_masked_states(states, views, examples)
        return loss_msm(selected, events, times, heads[task], lam=msm_lambda)

    if task == "bt":
        firsts, seconds = [], []
        for ex in examples:
            v1, v2 = twin_views(ex.history, rng, k, mask_ratio, mean_segment_len)
            firsts.append(v1)
            seconds.append(v2)
        h1, _ = encode(params, config, pad_views(firsts, k))
        h2, _ = encode(params, config, pad_views(seconds, k))
        projector = heads["bt"]
        return loss_bt(projector.apply(h1), projector.apply(h2), lam=bt_lambda)

    if task == "nep":
        prefixes, targets = [], []
        for ex in examples:
            split = nep_split(ex.history, rng)
            if split is not None:
                prefixes.append(identity(split[0]))
                targets.append(split[1])
        if not prefixes:
            raise ValueError("nep: every sequence in the batch is too short")
        h, _ = encode(params, config, pad_views(prefixes, k))
        return loss_nep(h, np.array(targets), heads["nep"])

    # nkehp
    prefixes, targets = [], []
    for ex in examples:
        split = nkehp_split(ex.history, rng, k, k_future)
        if split is not None:
            prefixes.append(identity(split[0]))
            targets.append(split[1])
    if not prefixes:
        raise ValueError("nkehp: every sequence in the batch is too short")
    h, _ = encode(params, config, pad_views(prefixes, k))
    return loss_nkehp(h, np.stack(targets), heads["nkehp"])
