"""Tests for AUC, aggregation, result tables, and curve export."""

from dataclasses import dataclass

import numpy as np
import pytest

from oracles import pairwise_auc
from seqssl import metrics


class TestAUC:
    def test_perfect_separation(self):
        assert metrics.auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_perfect_inversion(self):
        assert metrics.auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0

    def test_all_ties_give_half(self):
        assert metrics.auc([0, 1, 0, 1, 1], [0.4] * 5) == 0.5

    def test_single_class_rejected_naming_missing_class(self):
        with pytest.raises(ValueError, match="positive"):
            metrics.auc([0, 0], [0.1, 0.2])
        with pytest.raises(ValueError, match="negative"):
            metrics.auc([1, 1], [0.1, 0.2])

    def test_matches_pairwise_oracle_on_random_sets(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = int(rng.integers(5, 60))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # alternate continuous scores and heavy-tie integer scores
            if trial % 2:
                scores = rng.normal(size=n)
            else:
                scores = rng.integers(0, 4, size=n).astype(float)
            assert abs(metrics.auc(labels, scores) - pairwise_auc(labels, scores)) < 1e-12

    def test_invariant_under_strictly_increasing_transforms(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        scores = rng.normal(size=50)
        base = metrics.auc(labels, scores)
        assert metrics.auc(labels, np.exp(scores)) == base
        assert metrics.auc(labels, 3.0 * scores + 7.0) == base

    def test_label_flip_complements_auc_without_ties(self):
        # equality up to one ulp: the closing division U/(n1*n0) rounds
        # each side independently
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=41)
        labels[:2] = [0, 1]
        scores = rng.permutation(41).astype(float)  # distinct scores
        flipped = metrics.auc(1 - labels, scores)
        assert abs(flipped - (1.0 - metrics.auc(labels, scores))) < 5e-16

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.auc([0, 1], [0.5])


class TestScoredSet:
    def test_valid_roundtrip(self):
        s = metrics.ScoredSet([0.2, 0.8], [0, 1])
        assert s.scores.dtype == np.float64

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            metrics.ScoredSet([0.5, 0.5], [0, 2])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.ScoredSet([0.5], [0, 1])


class TestAggregate:
    def test_arithmetic_example(self):
        row = metrics.aggregate("abacus", [0.70, 0.72, 0.74], [0.70, 0.70, 0.70])
        np.testing.assert_allclose(row.mean, 0.72)
        np.testing.assert_allclose(row.std, np.std([0.70, 0.72, 0.74], ddof=1))
        np.testing.assert_allclose(row.delta_pct, 100 * 0.02 / 0.70)

    def test_identical_to_baseline_gives_zero_delta(self):
        row = metrics.aggregate("No-PT", [0.6, 0.7], [0.6, 0.7])
        assert row.delta_pct == 0.0

    def test_delta_sign_matches_mean_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.uniform(0.4, 0.9, size=3)
            b = rng.uniform(0.4, 0.9, size=3)
            row = metrics.aggregate("x", a, b)
            assert np.sign(row.delta_pct) == np.sign(a.mean() - b.mean())

    def test_seed_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.aggregate("x", [0.5, 0.6], [0.5, 0.6, 0.7])

    def test_single_seed_rejected(self):
        with pytest.raises(ValueError):
            metrics.aggregate("x", [0.5], [0.6])


class TestResultTable:
    def make_table(self):
        baseline = [0.60, 0.61, 0.62]
        return metrics.ResultTable(
            rows=[
                metrics.aggregate("No-PT", baseline, baseline),
                metrics.aggregate("abacus-r", [0.66, 0.67, 0.68], baseline),
            ]
        )

    def test_text_contains_rows_and_zero_baseline_delta(self):
        text = self.make_table().as_text()
        assert "No-PT" in text and "abacus-r" in text
        assert "+0.00" in text

    def test_csv_parses(self):
        lines = self.make_table().as_csv().strip().splitlines()
        assert lines[0] == "model,auc_mean,auc_std,delta_pct,n_seeds"
        fields = lines[2].split(",")
        assert fields[0] == "abacus-r"
        assert float(fields[1]) == pytest.approx(0.67)
        assert int(fields[4]) == 3


@dataclass
class FakeReport:
    tag: str
    seed: int
    val_metrics: list


class TestExportCurves:
    def make_reports(self):
        rng = np.random.default_rng(4)
        return [
            FakeReport(tag, seed, list(rng.random(50)))
            for tag in ("warm", "cold")
            for seed in (0, 1, 2)
        ]

    def test_cardinality(self):
        out = metrics.export_curves(self.make_reports())
        assert len(out.strip().splitlines()) == 1 + 2 * 3 * 50

    def test_sorted_by_run_seed_epoch(self):
        rows = metrics.export_curves(self.make_reports()).strip().splitlines()[1:]
        keys = [(r.split(",")[0], int(r.split(",")[1]), int(r.split(",")[2])) for r in rows]
        assert keys == sorted(keys)

    def test_re_export_byte_identical(self):
        reports = self.make_reports()
        assert metrics.export_curves(reports) == metrics.export_curves(reports)
