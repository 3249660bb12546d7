"""Pretraining and finetuning loops: batching, early stopping, seed
management, checkpointing, and the downstream purchase-prediction head.

Randomness is organized in named streams derived from the run seed so that
every reported number is a pure function of (seed, config, corpus):
  [seed, 555555]            encoder initialization (shared by pretraining
                            and the no-pretraining baseline, so warm-start
                            comparisons differ only in pretraining)
  [seed, 777777]            head initialization
  [seed, epoch]             per-epoch shuffle
  [seed, epoch, task_id]    per-task training augmentations
  [seed, 999999, task_id]   validation augmentations (re-created per epoch,
                            so validation losses are comparable)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .augment import identity
from .data import LabeledExample, time_split
from .encoders import EncoderConfig, encode, init_params, load_checkpoint, pad_views, save_checkpoint
from .metrics import auc
from .pretext import MTLWeights, TaskHead, compute_task_loss, make_head, make_task_heads, mtl_loss

ENCODER_INIT_STREAM = 555555
HEAD_INIT_STREAM = 777777
VAL_STREAM = 999999
MIN_IMPROVEMENT = 1e-5


@dataclass
class RunConfig:
    """Everything a training run needs besides the corpus and the seed."""

    stage: str
    encoder: EncoderConfig
    tasks: list[str] = field(default_factory=list)
    weights: MTLWeights | None = None
    lr: float = 0.01
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    split_fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
    mask_ratio: float = 0.15
    mean_segment_len: float = 5.0
    k_future: int = 10
    msm_lambda: float = 1.0
    bt_lambda: float = 1.0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    eval_batch_size: int = 1024
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = MTLWeights(self.weights)
        if self.stage == "pretrain":
            if not self.tasks:
                raise ValueError("pretraining needs at least one task")
            if self.weights is None:
                if len(self.tasks) == 1:
                    self.weights = MTLWeights({self.tasks[0]: 1.0})
                else:
                    raise ValueError("multi-task pretraining needs explicit weights")


@dataclass
class RunReport:
    """Per-epoch training record for one (run, seed)."""

    tag: str
    seed: int
    stage: str
    val_mode: str
    train_losses: list[dict[str, float]] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    test_auc: float | None = None
    std_floor_hits: int = 0

    def to_csv(self) -> str:
        tasks = sorted(self.train_losses[0]) if self.train_losses else []
        header = ["epoch"] + tasks + ["val_metric", "seconds"]
        lines = [",".join(header)]
        for i, row in enumerate(self.train_losses):
            cells = [str(i + 1)]
            cells += [f"{row[t]:.6f}" for t in tasks]
            cells.append(f"{self.val_metrics[i]:.6f}")
            cells.append(f"{self.epoch_seconds[i]:.3f}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [
            f"run:        {self.tag} (seed {self.seed})",
            f"epochs:     {len(self.val_metrics)} (best {self.best_epoch})",
            f"best val:   {self.val_metrics[self.best_epoch - 1]:.6f} ({self.val_mode})",
        ]
        if self.test_auc is not None:
            lines.append(f"test AUC:   {self.test_auc:.6f}")
        if self.std_floor_hits:
            lines.append(f"note:       zero-variance floor hit {self.std_floor_hits} times")
        return "\n".join(lines)


def early_stop(
    history: list[float], patience: int, mode: str, min_delta: float = MIN_IMPROVEMENT
) -> tuple[bool, int]:
    """Decide whether to stop after the last epoch in `history` and report
    the best epoch (1-indexed). An epoch improves when it beats the best so
    far by more than min_delta; stopping triggers once `patience` epochs
    pass without improvement."""
    if mode not in ("minimize", "maximize"):
        raise ValueError(f"unknown early-stop mode {mode!r}")
    if not history:
        raise ValueError("empty metric history")
    sign = 1.0 if mode == "maximize" else -1.0
    best_idx = 0
    best = sign * history[0]
    for i in range(1, len(history)):
        if sign * history[i] > best + min_delta:
            best = sign * history[i]
            best_idx = i
    return (len(history) - 1 - best_idx) >= patience, best_idx + 1


def _batches(n: int, batch_size: int, order: np.ndarray):
    """Contiguous index chunks; a trailing chunk of one example is dropped
    (batch statistics need at least two)."""
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size >= 2:
            yield chunk


def _task_loss_kwargs(config: RunConfig) -> dict:
    return dict(
        mask_ratio=config.mask_ratio,
        mean_segment_len=config.mean_segment_len,
        k_future=config.k_future,
        msm_lambda=config.msm_lambda,
        bt_lambda=config.bt_lambda,
    )


def _pretext_val_loss(
    config: RunConfig,
    params: dict[str, nc.Param],
    heads: dict[str, TaskHead],
    examples: list[LabeledExample],
    seed: int,
) -> float:
    """Validation MTL loss with fixed augmentation streams (identical draws
    every epoch). A trailing chunk of one example is dropped, mirroring
    training batches (batch losses need at least two examples)."""
    rngs = {
        task: np.random.default_rng([seed, VAL_STREAM, tid])
        for tid, task in enumerate(config.tasks)
    }
    kwargs = _task_loss_kwargs(config)
    total, count = 0.0, 0
    for chunk in _batches(len(examples), config.eval_batch_size, np.arange(len(examples))):
        batch = [examples[i] for i in chunk]
        losses = {
            task: compute_task_loss(task, params, config.encoder, heads, batch, rngs[task], **kwargs)
            for task in config.tasks
        }
        total += mtl_loss(losses, config.weights).item() * len(batch)
        count += len(batch)
    return total / count


def _snapshot(params: dict[str, nc.Param], heads) -> dict[str, np.ndarray]:
    arrays = {name: p.values.copy() for name, p in params.items()}
    for head in heads.values() if isinstance(heads, dict) else [heads]:
        for p in head.params():
            arrays[p.name] = p.values.copy()
    return arrays


def _restore(arrays: dict[str, np.ndarray], params: dict[str, nc.Param], heads) -> None:
    for name, p in params.items():
        p.values[...] = arrays[name]
    for head in heads.values() if isinstance(heads, dict) else [heads]:
        for p in head.params():
            p.values[...] = arrays[p.name]


def pretrain(
    config: RunConfig,
    corpus: list[LabeledExample],
    seed: int,
    checkpoint_out=None,
) -> tuple[RunReport, dict[str, np.ndarray]]:
    """Multi-task pretraining with early stopping on the validation MTL
    loss. Returns the report and the best-validation parameter snapshot
    (encoder plus task heads); optionally writes it as a checkpoint."""
    if config.stage != "pretrain":
        raise ValueError("config.stage must be 'pretrain'")
    if not corpus:
        raise ValueError("empty corpus")
    nc.reset_flags()
    split = time_split(corpus, config.split_fractions)
    params = init_params(config.encoder, np.random.default_rng([seed, ENCODER_INIT_STREAM]))
    heads = make_task_heads(config.tasks, config.encoder, np.random.default_rng([seed, HEAD_INIT_STREAM]))
    trainable = list(params.values()) + [p for t in config.tasks for p in heads[t].params()]
    opt = nc.OptimizerState(
        lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm
    )
    kwargs = _task_loss_kwargs(config)
    tag = "pretrain:" + "+".join(config.tasks)
    report = RunReport(tag=tag, seed=seed, stage="pretrain", val_mode="minimize")
    best_arrays = _snapshot(params, heads)
    best_val = np.inf

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(split.train))
        task_rngs = {
            task: np.random.default_rng([seed, epoch, tid])
            for tid, task in enumerate(config.tasks)
        }
        sums = {task: 0.0 for task in config.tasks}
        sums["mtl"] = 0.0
        seen = 0
        for batch_index, chunk in enumerate(_batches(len(split.train), config.batch_size, order)):
            batch = [split.train[i] for i in chunk]
            with nc.tape():
                losses = {
                    task: compute_task_loss(
                        task, params, config.encoder, heads, batch, task_rngs[task], **kwargs
                    )
                    for task in config.tasks
                }
                total = mtl_loss(losses, config.weights)
                if not np.isfinite(total.values).all():
                    raise nc.NumericsError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}"
                    )
                nc.backward(total)
            nc.adamw_step(opt, trainable)
            for task in config.tasks:
                sums[task] += losses[task].item() * len(batch)
            sums["mtl"] += total.item() * len(batch)
            seen += len(batch)
        report.train_losses.append({k: v / seen for k, v in sums.items()})

        val_loss = _pretext_val_loss(config, params, heads, split.val, seed)
        report.val_metrics.append(val_loss)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val_loss < best_val - MIN_IMPROVEMENT:
            best_val = val_loss
            best_arrays = _snapshot(params, heads)
        stop, best_epoch = early_stop(report.val_metrics, config.patience, "minimize")
        report.best_epoch = best_epoch
        if stop:
            break

    report.std_floor_hits = nc.FLAGS["std_floor_hits"]
    if checkpoint_out is not None:
        save_checkpoint(
            checkpoint_out,
            config.encoder.fingerprint(),
            best_arrays,
            meta={"stage": "pretrain", "tasks": list(config.tasks), "seed": seed},
        )
    return report, best_arrays


def _load_encoder_params(
    config: RunConfig, seed: int, checkpoint
) -> dict[str, nc.Param]:
    """Fresh or checkpoint-initialized encoder parameters; shape and
    fingerprint mismatches are rejected before any training happens."""
    fresh = init_params(config.encoder, np.random.default_rng([seed, ENCODER_INIT_STREAM]))
    if checkpoint is None:
        return fresh
    if isinstance(checkpoint, dict):
        arrays = checkpoint
    else:
        _, arrays = load_checkpoint(checkpoint, expected_fingerprint=config.encoder.fingerprint())
    params = {}
    for name, p in fresh.items():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing encoder parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"expected {p.shape}"
            )
        params[name] = nc.Param(name, arrays[name])
    return params


def score_examples(
    config: RunConfig,
    params: dict[str, nc.Param],
    head: TaskHead,
    examples: list[LabeledExample],
) -> np.ndarray:
    """Purchase probabilities for a list of examples, evaluated in chunks.
    Unlike training batches, every example is scored, including a trailing
    chunk of one."""
    scores = np.empty(len(examples))
    for start in range(0, len(examples), config.eval_batch_size):
        chunk = np.arange(start, min(start + config.eval_batch_size, len(examples)))
        batch = [examples[i] for i in chunk]
        h, _ = encode(params, config.encoder, pad_views([identity(ex.history) for ex in batch], config.encoder.k))
        logits = head.apply(h).values[:, 0]
        scores[chunk] = 1.0 / (1.0 + np.exp(-logits))
    return scores


def finetune(
    config: RunConfig,
    corpus: list[LabeledExample],
    seed: int,
    checkpoint=None,
    tag: str | None = None,
) -> tuple[RunReport, dict[str, np.ndarray]]:
    """Supervised finetuning of encoder plus a fresh sigmoid head on the
    purchase labels, early-stopped on validation AUC; the test AUC is
    computed at the best-validation snapshot. `checkpoint` is a path or a
    parameter-array dict; None trains the no-pretraining baseline. The head
    initialization stream depends only on the seed, so baseline and
    pretrained runs start from identical heads."""
    if config.stage != "finetune":
        raise ValueError("config.stage must be 'finetune'")
    if not corpus:
        raise ValueError("empty corpus")
    nc.reset_flags()
    split = time_split(corpus, config.split_fractions)
    params = _load_encoder_params(config, seed, checkpoint)
    head = make_head("finetune", config.encoder.hidden_dim, 1, np.random.default_rng([seed, HEAD_INIT_STREAM]))
    trainable = head.params() + ([] if config.freeze_encoder else list(params.values()))
    opt = nc.OptimizerState(
        lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm
    )
    if tag is None:
        tag = "finetune:no-pt" if checkpoint is None else "finetune:pretrained"
    report = RunReport(tag=tag, seed=seed, stage="finetune", val_mode="maximize")
    best_arrays = _snapshot(params, head)
    best_val = -np.inf

    val_labels = np.array([ex.label for ex in split.val])
    test_labels = np.array([ex.label for ex in split.test])
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(split.train))
        bce_sum, seen = 0.0, 0
        for batch_index, chunk in enumerate(_batches(len(split.train), config.batch_size, order)):
            batch = [split.train[i] for i in chunk]
            labels = np.array([ex.label for ex in batch], dtype=np.float64)
            with nc.tape():
                h, _ = encode(
                    params, config.encoder, pad_views([identity(ex.history) for ex in batch], config.encoder.k)
                )
                logits = nc.take(head.apply(h), (slice(None), 0))
                loss = nc.mean(nc.sub(nc.softplus(logits), nc.mul(labels, logits)))
                if not np.isfinite(loss.values).all():
                    raise nc.NumericsError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}"
                    )
                nc.backward(loss)
            nc.adamw_step(opt, trainable)
            bce_sum += loss.item() * len(batch)
            seen += len(batch)
        report.train_losses.append({"bce": bce_sum / seen})

        val_auc = auc(val_labels, score_examples(config, params, head, split.val))
        report.val_metrics.append(val_auc)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val_auc > best_val + MIN_IMPROVEMENT:
            best_val = val_auc
            best_arrays = _snapshot(params, head)
        stop, best_epoch = early_stop(report.val_metrics, config.patience, "maximize")
        report.best_epoch = best_epoch
        if stop:
            break

    _restore(best_arrays, params, head)
    report.test_auc = auc(test_labels, score_examples(config, params, head, split.test))
    report.std_floor_hits = nc.FLAGS["std_floor_hits"]
    return report, best_arrays
