"""ROC-AUC, multi-seed aggregation, result tables, and curve export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredSet:
    """Paired prediction scores and binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and the same length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")


def auc(labels, scores) -> float:
    """Rank-based (Mann-Whitney) ROC-AUC with midrank tie handling:
    the probability a random positive outranks a random negative,
    ties counted as 1/2."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must have the same length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0:
        raise ValueError("AUC undefined: no positive examples")
    if n_neg == 0:
        raise ValueError("AUC undefined: no negative examples")

    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    group_starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_scores)) + 1])
    group_ends = np.concatenate([group_starts[1:], [n]])
    midranks = (group_starts + group_ends - 1) / 2.0 + 1.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(midranks, group_ends - group_starts)

    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ResultRow:
    """One table row: model tag, AUC mean/std over seeds, percent change
    against the baseline mean."""

    tag: str
    mean: float
    std: float
    delta_pct: float
    n_seeds: int


def aggregate(tag: str, aucs, baseline_aucs) -> ResultRow:
    """Mean and sample std (n-1) over seeds plus the percent difference of
    means against the baseline run."""
    aucs = np.asarray(aucs, dtype=np.float64)
    baseline = np.asarray(baseline_aucs, dtype=np.float64)
    if aucs.size != baseline.size:
        raise ValueError(
            f"seed count mismatch: {aucs.size} run AUCs vs {baseline.size} baseline"
        )
    if aucs.size < 2:
        raise ValueError("need at least 2 seeds for a std estimate")
    mean = float(aucs.mean())
    base_mean = float(baseline.mean())
    return ResultRow(
        tag=tag,
        mean=mean,
        std=float(aucs.std(ddof=1)),
        delta_pct=100.0 * (mean - base_mean) / base_mean,
        n_seeds=int(aucs.size),
    )


@dataclass
class ResultTable:
    """Rows for one encoder, mirroring the AUC / delta-percent table layout."""

    rows: list[ResultRow]

    def as_text(self) -> str:
        width = max([len(r.tag) for r in self.rows] + [5])
        lines = [f"{'model':<{width}}  {'AUC':>17}  {'Δ (%)':>7}"]
        for r in self.rows:
            lines.append(
                f"{r.tag:<{width}}  {r.mean:.4f} ± {r.std:.4f}  {r.delta_pct:+7.2f}"
            )
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["model,auc_mean,auc_std,delta_pct,n_seeds"]
        for r in self.rows:
            lines.append(
                f"{r.tag},{r.mean:.6f},{r.std:.6f},{r.delta_pct:+.4f},{r.n_seeds}"
            )
        return "\n".join(lines) + "\n"


def export_curves(reports) -> str:
    """Long-format validation curves: one CSV row per (run, seed, epoch),
    sorted, suitable for any plotting tool. Each report must provide tag,
    seed, and val_metrics (one value per epoch)."""
    rows = []
    for report in reports:
        for epoch, value in enumerate(report.val_metrics, start=1):
            rows.append((report.tag, report.seed, epoch, value))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    lines = ["run,seed,epoch,val_metric"]
    lines.extend(f"{tag},{seed},{epoch},{value:.6f}" for tag, seed, epoch, value in rows)
    return "\n".join(lines) + "\n"
