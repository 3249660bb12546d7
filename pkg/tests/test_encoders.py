"""Tests for embeddings, the GRU encoder, the transformer encoder, and checkpoints."""

import numpy as np
import pytest

from seqssl import augment, data, encoders
from seqssl import numcore as nc


def random_views(rng, n, k=5, min_len=1, max_len=12):
    views = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len))
        seq = data.EventSequence(rng.integers(1, k + 1, size=length), np.sort(rng.random(length)))
        views.append(augment.identity(seq))
    return views


def view_of(events, times=None):
    if times is None:
        times = np.linspace(0, 1, len(events))
    return augment.identity(data.EventSequence(events, times))


class TestEncoderConfig:
    def test_kind_defaults(self):
        assert encoders.EncoderConfig(kind="gru").n_layers == 1
        assert encoders.EncoderConfig(kind="transformer").n_layers == 2

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            encoders.EncoderConfig(kind="lstm")

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            encoders.EncoderConfig(kind="transformer", hidden_dim=8, n_heads=3)

    def test_fingerprint_distinguishes_configs(self):
        a = encoders.EncoderConfig(kind="gru", hidden_dim=8)
        b = encoders.EncoderConfig(kind="gru", hidden_dim=16)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == encoders.EncoderConfig(kind="gru", hidden_dim=8).fingerprint()


class TestEmbedding:
    def test_event_row_mapping(self):
        np.testing.assert_array_equal(encoders.event_rows(np.array([1, 4, 5]), k=4), [0, 3, 4])

    def test_out_of_range_event_rejected(self):
        with pytest.raises(ValueError):
            encoders.event_rows(np.array([6]), k=4)
        with pytest.raises(ValueError):
            encoders.event_rows(np.array([0]), k=4)

    def test_position_width_is_d_plus_one(self):
        cfg = encoders.EncoderConfig(kind="gru", k=4, embed_dim=3)
        params = encoders.init_params(cfg, np.random.default_rng(0))
        x = encoders.embed_view(view_of([1, 2]), params, k=4)
        assert x.shape == (1, 2, 4)

    def test_equal_event_and_time_give_identical_vectors(self):
        cfg = encoders.EncoderConfig(kind="gru", k=4, embed_dim=3)
        params = encoders.init_params(cfg, np.random.default_rng(0))
        x = encoders.embed_view(view_of([2, 3, 2], [0.4, 0.4, 0.4]), params, k=4).values
        np.testing.assert_array_equal(x[0, 0], x[0, 2])

    def test_table_has_k_plus_2_rows(self):
        cfg = encoders.EncoderConfig(kind="gru", k=7, embed_dim=3)
        params = encoders.init_params(cfg, np.random.default_rng(0))
        assert params["embed"].shape == (9, 3)

    def test_pad_views_uses_sentinel_row(self):
        batch = encoders.pad_views([view_of([1, 2, 3]), view_of([2])], k=4)
        assert batch.rows.shape == (2, 3)
        np.testing.assert_array_equal(batch.rows[1], [1, 4, 4])
        np.testing.assert_array_equal(batch.lengths, [3, 1])

    def test_pad_empty_rejected(self):
        with pytest.raises(ValueError):
            encoders.pad_views([], k=4)

    @pytest.mark.parametrize("kind", ["gru", "transformer"])
    def test_gradient_zero_for_absent_event_rows(self, kind):
        cfg = encoders.EncoderConfig(kind=kind, k=5, embed_dim=3, hidden_dim=8, max_len=10)
        params = encoders.init_params(cfg, np.random.default_rng(1))
        batch = encoders.pad_views([view_of([1, 3, 1]), view_of([3])], k=5)
        with nc.tape():
            h, _ = encoders.encode(params, cfg, batch)
            nc.backward(nc.sum(nc.mul(h, h)))
        grad = params["embed"].grad
        present = {0, 2}  # rows of events 1 and 3
        if kind == "transformer":
            present.add(6)  # CLS row
        for row in range(7):
            if row in present:
                assert np.abs(grad[row]).max() > 0
            else:
                np.testing.assert_array_equal(grad[row], 0.0)


class TestGRU:
    def test_single_step_matches_manual_cell(self):
        cfg = encoders.EncoderConfig(kind="gru", k=3, embed_dim=3, hidden_dim=8, max_len=5)
        params = encoders.init_params(cfg, np.random.default_rng(2))
        view = view_of([2], [0.7])
        h, _ = encoders.encode(params, cfg, encoders.pad_views([view], 3))

        x = np.concatenate([params["embed"].values[1], [0.7]])
        pre = x @ params["gru0_W"].values + params["gru0_b"].values
        z = 1 / (1 + np.exp(-pre[:8]))
        c = np.tanh(pre[16:])  # r gates a zero initial state, so it drops out
        np.testing.assert_allclose(h.values[0], z * c, atol=1e-12)

    def test_zero_parameters_give_zero_state(self):
        # z = sigmoid(0) = 0.5, candidate = tanh(0) = 0, so h stays at 0
        cfg = encoders.EncoderConfig(kind="gru", k=3, embed_dim=3, hidden_dim=4, max_len=8)
        params = encoders.init_params(cfg, np.random.default_rng(0))
        for name, p in params.items():
            if name != "embed":
                p.values[...] = 0.0
        h, states = encoders.encode(params, cfg, encoders.pad_views([view_of([1, 2, 3])], 3))
        np.testing.assert_array_equal(h.values, 0.0)
        np.testing.assert_array_equal(states.values, 0.0)

    def test_batch_of_one_matches_batched_row(self):
        rng = np.random.default_rng(3)
        cfg = encoders.EncoderConfig(kind="gru", k=5, embed_dim=3, hidden_dim=8, max_len=16)
        params = encoders.init_params(cfg, rng)
        views = random_views(rng, 8)
        batch_h, _ = encoders.encode(params, cfg, encoders.pad_views(views, 5))
        for i in (0, 3, 7):
            single_h, _ = encoders.encode(params, cfg, encoders.pad_views([views[i]], 5))
            np.testing.assert_allclose(single_h.values[0], batch_h.values[i], atol=1e-12)

    def test_padding_never_leaks(self):
        rng = np.random.default_rng(4)
        cfg = encoders.EncoderConfig(kind="gru", k=5, embed_dim=3, hidden_dim=8, max_len=16)
        params = encoders.init_params(cfg, rng)
        batch = encoders.pad_views(random_views(rng, 6), 5)
        h, _ = encoders.encode(params, cfg, batch)
        tampered = encoders.PaddedBatch(batch.rows.copy(), batch.times.copy(), batch.lengths)
        for b in range(6):
            tampered.rows[b, batch.lengths[b] :] = 0
            tampered.times[b, batch.lengths[b] :] = 0.93
        h2, _ = encoders.encode(params, cfg, tampered)
        np.testing.assert_array_equal(h2.values, h.values)

    def test_order_sensitivity_counterexample(self):
        cfg = encoders.EncoderConfig(kind="gru", k=3, embed_dim=3, hidden_dim=8, max_len=10)
        params = encoders.init_params(cfg, np.random.default_rng(11))
        fwd = encoders.pad_views([view_of([1, 2, 3], [0.0, 0.5, 1.0])], 3)
        rev_seq = data.EventSequence([3, 2, 1], [0.0, 0.5, 1.0], validate=False)
        rev = encoders.pad_views([augment.AugmentedView(rev_seq, np.empty(0, np.int64), "identity")], 3)
        h_f, _ = encoders.encode(params, cfg, fwd)
        h_r, _ = encoders.encode(params, cfg, rev)
        assert np.abs(h_f.values - h_r.values).max() > 1e-3

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        cfg = encoders.EncoderConfig(kind="gru", k=4, embed_dim=3, hidden_dim=6, max_len=10)
        params = encoders.init_params(cfg, rng)
        batch = encoders.pad_views(random_views(rng, 4, k=4, max_len=8), 4)
        target = np.random.default_rng(6).normal(size=(4, 6))

        def build():
            h, states = encoders.encode(params, cfg, batch)
            d = nc.sub(h, target)
            return nc.add(nc.mean(nc.mul(d, d)), nc.mean(nc.mul(states, states)))

        report = nc.grad_check(build, list(params.values()), step=1e-5, tol=1e-4)
        assert report.passed, report.failures()


class TestTransformer:
    def make(self, seed=7, k=5, max_len=16, n_layers=0):
        cfg = encoders.EncoderConfig(
            kind="transformer", k=k, embed_dim=3, hidden_dim=8, n_layers=n_layers, max_len=max_len
        )
        return cfg, encoders.init_params(cfg, np.random.default_rng(seed))

    def test_attention_rows_sum_to_one(self):
        cfg, params = self.make()
        rng = np.random.default_rng(8)
        batch = encoders.pad_views(random_views(rng, 5), 5)
        trace = {}
        encoders.encode(params, cfg, batch, trace=trace)
        assert len(trace["attention"]) == cfg.n_layers
        for attn in trace["attention"]:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-9)

    def test_permuting_inputs_with_positions_preserves_h(self):
        cfg, params = self.make()
        rng = np.random.default_rng(9)
        length = 6
        views = [view_of(rng.integers(1, 6, size=length), np.sort(rng.random(length))) for _ in range(3)]
        batch = encoders.pad_views(views, 5)
        h, _ = encoders.encode(params, cfg, batch)

        perm = rng.permutation(length)
        permuted = encoders.PaddedBatch(
            batch.rows[:, perm], batch.times[:, perm], batch.lengths
        )
        ids = np.tile(np.concatenate([perm, [length]]), (3, 1))
        h_perm, _ = encoders.encode(params, cfg, permuted, position_ids=ids)
        np.testing.assert_allclose(h_perm.values, h.values, atol=1e-10)

    def test_batch_of_one_matches_padded_batch_row(self):
        cfg, params = self.make()
        rng = np.random.default_rng(10)
        views = random_views(rng, 8)
        batch_h, _ = encoders.encode(params, cfg, encoders.pad_views(views, 5))
        for i in (0, 4, 7):
            single_h, _ = encoders.encode(params, cfg, encoders.pad_views([views[i]], 5))
            np.testing.assert_allclose(single_h.values[0], batch_h.values[i], atol=1e-10)

    def test_padding_never_leaks(self):
        cfg, params = self.make()
        rng = np.random.default_rng(12)
        batch = encoders.pad_views(random_views(rng, 6), 5)
        h, _ = encoders.encode(params, cfg, batch)
        tampered = encoders.PaddedBatch(batch.rows.copy(), batch.times.copy(), batch.lengths)
        for b in range(6):
            tampered.rows[b, batch.lengths[b] + 1 :] = 0
            tampered.times[b, batch.lengths[b] + 1 :] = 0.41
        h2, _ = encoders.encode(params, cfg, tampered)
        assert np.abs(h2.values - h.values).max() <= 1e-12

    def test_width_beyond_position_table_rejected(self):
        cfg, params = self.make(max_len=4)
        batch = encoders.pad_views([view_of([1, 2, 3, 1, 2])], 5)
        with pytest.raises(nc.ShapeError):
            encoders.encode(params, cfg, batch)

    def test_gradients_match_finite_differences(self):
        cfg, params = self.make(seed=13, n_layers=1)
        rng = np.random.default_rng(14)
        batch = encoders.pad_views(random_views(rng, 4, max_len=8), 5)
        target = np.random.default_rng(15).normal(size=(4, 8))

        def build():
            h, states = encoders.encode(params, cfg, batch)
            d = nc.sub(h, target)
            return nc.add(nc.mean(nc.mul(d, d)), nc.mean(nc.mul(states, states)))

        report = nc.grad_check(build, list(params.values()), step=1e-5, tol=1e-4)
        assert report.passed, report.failures()


class TestCheckpoints:
    def test_roundtrip_reproduces_h_bit_identically(self, tmp_path):
        rng = np.random.default_rng(16)
        cfg = encoders.EncoderConfig(kind="transformer", k=5, embed_dim=3, hidden_dim=8, max_len=16)
        params = encoders.init_params(cfg, rng)
        batch = encoders.pad_views(random_views(rng, 4), 5)
        h, _ = encoders.encode(params, cfg, batch)

        path = tmp_path / "ckpt.npz"
        encoders.save_checkpoint(
            path, cfg.fingerprint(), {n: p.values for n, p in params.items()}
        )
        meta, arrays = encoders.load_checkpoint(path, cfg.fingerprint())
        restored = {n: nc.Param(n, v) for n, v in arrays.items()}
        h2, _ = encoders.encode(restored, cfg, batch)
        np.testing.assert_array_equal(h2.values, h.values)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        cfg = encoders.EncoderConfig(kind="gru", k=5)
        params = encoders.init_params(cfg, np.random.default_rng(0))
        path = tmp_path / "ckpt.npz"
        encoders.save_checkpoint(path, cfg.fingerprint(), {n: p.values for n, p in params.items()})
        other = encoders.EncoderConfig(kind="gru", k=5, hidden_dim=16)
        with pytest.raises(ValueError):
            encoders.load_checkpoint(path, other.fingerprint())

    def test_foreign_archive_rejected(self, tmp_path):
        path = tmp_path / "not_ckpt.npz"
        np.savez(path, __meta__="{}", w=np.zeros(3))
        with pytest.raises(ValueError):
            encoders.load_checkpoint(path)
