"""Input embedding and two sequence encoders: a GRU and a small pre-LN
bidirectional transformer with a trailing CLS summary token.

The embedding table has K+2 rows: event type e in [1..K] maps to row e-1,
the mask sentinel (event id K+1) to row K, and the CLS token to row K+1.
Row K doubles as the padding row; padding never reaches the output because
the GRU holds its state past each sequence end and the transformer
attention-masks padded slots. Each position feeds the encoder as
[embedding row || timestamp], width embed_dim + 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .augment import AugmentedView

ATTENTION_MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters; n_layers 0 means the kind's default
    (1 for gru, 2 for transformer)."""

    kind: str = "gru"
    k: int = 6
    embed_dim: int = 3
    hidden_dim: int = 8
    n_layers: int = 0
    n_heads: int = 2
    ff_dim: int = 32
    max_len: int = 50

    def __post_init__(self):
        if self.kind not in ("gru", "transformer"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.n_layers == 0:
            object.__setattr__(self, "n_layers", 1 if self.kind == "gru" else 2)
        for name in ("k", "embed_dim", "hidden_dim", "n_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kind == "transformer":
            if self.hidden_dim % self.n_heads != 0:
                raise ValueError("hidden_dim must be divisible by n_heads")

    def fingerprint(self) -> str:
        return (
            f"{self.kind}|k={self.k}|d={self.embed_dim}|h={self.hidden_dim}"
            f"|layers={self.n_layers}|heads={self.n_heads}|ff={self.ff_dim}"
            f"|maxlen={self.max_len}"
        )

    @property
    def input_width(self) -> int:
        return self.embed_dim + 1


@dataclass
class PaddedBatch:
    """Right-padded batch: embedding-row indices, timestamps, true lengths."""

    rows: np.ndarray
    times: np.ndarray
    lengths: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def event_rows(events: np.ndarray, k: int) -> np.ndarray:
    """Map event ids to embedding rows: [1..K] -> [0..K-1], sentinel K+1 -> K."""
    events = np.asarray(events)
    if events.size and (events.min() < 1 or events.max() > k + 1):
        raise ValueError(f"event ids must lie in [1..{k + 1}] (sentinel included)")
    return events - 1


def pad_views(views: list[AugmentedView], k: int) -> PaddedBatch:
    """Stack views into a right-padded batch; padded slots use the sentinel
    row and time 0."""
    if not views:
        raise ValueError("cannot pad an empty list of views")
    lengths = np.array([len(v.seq) for v in views], dtype=np.int64)
    width = int(lengths.max())
    rows = np.full((len(views), width), k, dtype=np.int64)
    times = np.zeros((len(views), width), dtype=np.float64)
    for b, view in enumerate(views):
        rows[b, : lengths[b]] = event_rows(view.seq.events, k)
        times[b, : lengths[b]] = view.seq.times
    return PaddedBatch(rows=rows, times=times, lengths=lengths)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, nc.Param]:
    """Embedding table uniform(-0.1, 0.1); Xavier-uniform weights; zero biases."""
    k, d, h = config.k, config.embed_dim, config.hidden_dim
    params: dict[str, nc.Param] = {}

    def add(name, values):
        params[name] = nc.Param(name, values)

    add("embed", rng.uniform(-0.1, 0.1, size=(k + 2, d)))
    if config.kind == "gru":
        in_dim = config.input_width
        for i in range(config.n_layers):
            add(f"gru{i}_W", _xavier(rng, in_dim, 3 * h, (in_dim, 3 * h)))
            add(f"gru{i}_Uzr", _xavier(rng, h, 2 * h, (h, 2 * h)))
            add(f"gru{i}_Uc", _xavier(rng, h, h, (h, h)))
            add(f"gru{i}_b", np.zeros(3 * h))
            in_dim = h
    else:
        add("proj_W", _xavier(rng, config.input_width, h, (config.input_width, h)))
        add("proj_b", np.zeros(h))
        add("pos", rng.uniform(-0.1, 0.1, size=(config.max_len + 1, h)))
        for i in range(config.n_layers):
            add(f"t{i}_ln1_g", np.ones(h))
            add(f"t{i}_ln1_b", np.zeros(h))
            for gate in ("q", "k", "v", "o"):
                add(f"t{i}_W{gate}", _xavier(rng, h, h, (h, h)))
                add(f"t{i}_b{gate}", np.zeros(h))
            add(f"t{i}_ln2_g", np.ones(h))
            add(f"t{i}_ln2_b", np.zeros(h))
            add(f"t{i}_ff1_W", _xavier(rng, h, config.ff_dim, (h, config.ff_dim)))
            add(f"t{i}_ff1_b", np.zeros(config.ff_dim))
            add(f"t{i}_ff2_W", _xavier(rng, config.ff_dim, h, (config.ff_dim, h)))
            add(f"t{i}_ff2_b", np.zeros(h))
        add("ln_f_g", np.ones(h))
        add("ln_f_b", np.zeros(h))
    return params


def _linear3(x: nc.Tensor, w: nc.Tensor, b: nc.Tensor) -> nc.Tensor:
    """(B, L, in) @ (in, out) + (out,) via a flattened 2-D matmul."""
    bsz, length, width = x.shape
    flat = nc.matmul(nc.reshape(x, (bsz * length, width)), w)
    return nc.reshape(nc.add(flat, b), (bsz, length, w.shape[1]))


def _embed(params, rows: np.ndarray, times: np.ndarray) -> nc.Tensor:
    """Per-position [embedding row || timestamp] vectors, shape (B, L, d+1)."""
    table = params["embed"]
    bsz, length = rows.shape
    emb = nc.reshape(nc.gather(table, rows.ravel()), (bsz, length, table.shape[1]))
    return nc.concat([emb, nc.constant(times[..., None])], axis=2)


def embed_view(view: AugmentedView, params, k: int) -> nc.Tensor:
    """Embed a single view (no padding), shape (1, l, d+1)."""
    rows = event_rows(view.seq.events, k)[None, :]
    return _embed(params, rows, view.seq.times[None, :])


def _gru_forward(params, config: EncoderConfig, x: nc.Tensor, lengths: np.ndarray):
    bsz, width, _ = x.shape
    h_dim = config.hidden_dim
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)
    inp = x
    h = None
    states = None
    for layer in range(config.n_layers):
        w = params[f"gru{layer}_W"]
        uzr = params[f"gru{layer}_Uzr"]
        uc = params[f"gru{layer}_Uc"]
        b = params[f"gru{layer}_b"]
        xw = _linear3(inp, w, b)
        h = nc.constant(np.zeros((bsz, h_dim)))
        steps = []
        for t in range(width):
            xw_t = nc.take(xw, (slice(None), t))
            zr = nc.sigmoid(
                nc.add(nc.take(xw_t, (slice(None), slice(0, 2 * h_dim))), nc.matmul(h, uzr))
            )
            z = nc.take(zr, (slice(None), slice(0, h_dim)))
            r = nc.take(zr, (slice(None), slice(h_dim, 2 * h_dim)))
            c = nc.tanh(
                nc.add(
                    nc.take(xw_t, (slice(None), slice(2 * h_dim, 3 * h_dim))),
                    nc.matmul(nc.mul(r, h), uc),
                )
            )
            h_new = nc.add(nc.mul(nc.sub(1.0, z), h), nc.mul(z, c))
            # hold the state past each sequence end so padding cannot leak
            m = mask[:, t : t + 1]
            h = nc.add(nc.mul(m, h_new), nc.mul(1.0 - m, h))
            steps.append(nc.reshape(h, (bsz, 1, h_dim)))
        states = nc.concat(steps, axis=1)
        inp = states
    return h, states


def _split_heads(t: nc.Tensor, n_heads: int) -> nc.Tensor:
    bsz, length, h_dim = t.shape
    head_dim = h_dim // n_heads
    return nc.swapaxes(nc.reshape(t, (bsz, length, n_heads, head_dim)), 1, 2)


def _transformer_forward(
    params,
    config: EncoderConfig,
    batch: PaddedBatch,
    position_ids: np.ndarray | None = None,
    trace: dict | None = None,
):
    bsz, width = batch.rows.shape
    if width + 1 > config.max_len + 1:
        raise nc.ShapeError(
            "encode_transformer",
            f"sequence width {width} exceeds position table for max_len {config.max_len}",
        )
    ext = width + 1
    rows = np.full((bsz, ext), config.k, dtype=np.int64)
    rows[:, :width] = batch.rows
    rows[np.arange(bsz), batch.lengths] = config.k + 1  # CLS row
    times = np.zeros((bsz, ext))
    times[:, :width] = batch.times
    times[np.arange(bsz), batch.lengths] = 1.0  # CLS timestamp
    valid = np.arange(ext)[None, :] <= batch.lengths[:, None]

    if position_ids is None:
        position_ids = np.tile(np.arange(ext), (bsz, 1))
    else:
        position_ids = np.asarray(position_ids)
        if position_ids.shape != (bsz, ext):
            raise nc.ShapeError(
                "encode_transformer",
                "position_ids shape mismatch",
                position_ids.shape,
                (bsz, ext),
            )

    x = _embed(params, rows, times)
    x = _linear3(x, params["proj_W"], params["proj_b"])
    pos = nc.reshape(
        nc.gather(params["pos"], position_ids.ravel()),
        (bsz, ext, config.hidden_dim),
    )
    x = nc.add(x, pos)

    head_dim = config.hidden_dim // config.n_heads
    bias = np.where(valid, 0.0, ATTENTION_MASK_BIAS)[:, None, None, :]
    for layer in range(config.n_layers):
        a = nc.layer_norm(x, params[f"t{layer}_ln1_g"], params[f"t{layer}_ln1_b"])
        q = _split_heads(_linear3(a, params[f"t{layer}_Wq"], params[f"t{layer}_bq"]), config.n_heads)
        k = _split_heads(_linear3(a, params[f"t{layer}_Wk"], params[f"t{layer}_bk"]), config.n_heads)
        v = _split_heads(_linear3(a, params[f"t{layer}_Wv"], params[f"t{layer}_bv"]), config.n_heads)
        scores = nc.add(nc.mul(nc.matmul(q, nc.swapaxes(k, 2, 3)), 1.0 / np.sqrt(head_dim)), bias)
        attn = nc.softmax(scores, axis=-1)
        if trace is not None:
            trace.setdefault("attention", []).append(attn.values.copy())
        ctx = nc.reshape(
            nc.swapaxes(nc.matmul(attn, v), 1, 2), (bsz, ext, config.hidden_dim)
        )
        x = nc.add(x, _linear3(ctx, params[f"t{layer}_Wo"], params[f"t{layer}_bo"]))
        f = nc.layer_norm(x, params[f"t{layer}_ln2_g"], params[f"t{layer}_ln2_b"])
        ff = _linear3(
            nc.relu(_linear3(f, params[f"t{layer}_ff1_W"], params[f"t{layer}_ff1_b"])),
            params[f"t{layer}_ff2_W"],
            params[f"t{layer}_ff2_b"],
        )
        x = nc.add(x, ff)
    x = nc.layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    h = nc.take(x, (np.arange(bsz), batch.lengths))
    states = nc.take(x, (slice(None), slice(0, width)))
    return h, states


def encode(
    params,
    config: EncoderConfig,
    batch: PaddedBatch,
    position_ids: np.ndarray | None = None,
    trace: dict | None = None,
) -> tuple[nc.Tensor, nc.Tensor]:
    """Run the configured encoder on a padded batch.

    Returns (h, states): h is the sequence embedding, shape (B, hidden);
    states are per-position outputs, shape (B, L, hidden) — GRU per-step
    hidden states, transformer block outputs at the event positions.
    """
    x = _embed(params, batch.rows, batch.times)
    if config.kind == "gru":
        h, states = _gru_forward(params, config, x, batch.lengths)
    else:
        h, states = _transformer_forward(params, config, batch, position_ids, trace)
    if not np.all(np.isfinite(h.values)):
        raise nc.NumericsError("encoder produced non-finite embeddings")
    return h, states


def save_checkpoint(path, fingerprint: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned parameter archive stamped with the config fingerprint."""
    header = {"fingerprint": fingerprint, "format": "seqssl-checkpoint", "version": 1}
    if meta:
        header.update(meta)
    np.savez(path, __meta__=json.dumps(header), **arrays)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Load (meta, arrays); rejects fingerprint mismatches when expected."""
    with np.load(path) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != "seqssl-checkpoint":
            raise ValueError(f"not a checkpoint file: {path}")
        arrays = {name: archive[name] for name in archive.files if name != "__meta__"}
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise ValueError(
            f"checkpoint fingerprint {meta['fingerprint']!r} does not match "
            f"expected {expected_fingerprint!r}"
        )
    return meta, arrays
