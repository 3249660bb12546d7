"""Command-line entry point binding JSON config files to the pipeline:
corpus generation, ingestion, diagnostics, pretraining, finetuning and
evaluation.

Config files are strict JSON with sections dataset / encoder /
pretrain-tasks / optimizer / trainer / eval / seeds; unknown keys are
rejected and validation reports every violation, not just the first.
Environment variables are honored only for path roots: SEQSSL_DATA_ROOT
prefixes relative dataset paths, SEQSSL_RUN_ROOT prefixes the run
directory (default ./runs).

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

Every training command writes an immutable run directory named by config
hash and timestamp: config copy, per-seed epoch CSVs, summaries and
checkpoints, validation curves, aggregated result table, and finally a
COMPLETED marker (the last write)."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import (
    TAOBAO_EVENT_TYPES,
    IngestStats,
    diagnostics,
    gen_synthetic,
    ingest_taobao,
    load_corpus,
    save_corpus,
    time_split,
)
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .metrics import ResultTable, aggregate, auc, export_curves
from .pretext import PRETEXT_TASKS, MTLWeights, head_from_arrays
from .trainer import RunConfig, finetune, pretrain, score_examples

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_ROOT_VAR = "SEQSSL_DATA_ROOT"
RUN_ROOT_VAR = "SEQSSL_RUN_ROOT"
COMPLETION_MARKER = "COMPLETED"


class ConfigError(Exception):
    """Carries the full list of config violations."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

_SECTIONS = ("dataset", "encoder", "pretrain-tasks", "optimizer", "trainer", "eval", "seeds")

_ENCODER_KEYS = ("kind", "k", "embed_dim", "hidden_dim", "n_layers", "n_heads", "ff_dim", "max_len")
_OPTIMIZER_KEYS = ("lr", "weight_decay", "clip_norm")
_TRAINER_KEYS = (
    "batch_size",
    "max_epochs",
    "patience",
    "mask_ratio",
    "mean_segment_len",
    "k_future",
    "msm_lambda",
    "bt_lambda",
    "freeze_encoder",
)


def _resolve_data_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(DATA_ROOT_VAR)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_VAR, "runs"))


def _check_unknown(section: str, doc: dict, allowed, out: list[str]) -> None:
    for key in doc:
        if key not in allowed:
            out.append(f"{section}: unknown key {key!r}")


def _number(doc, section, key, out, *, minimum=None, exclusive=False, integer=False):
    """Validate an optional numeric key; returns the value or None."""
    if key not in doc:
        return None
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        out.append(f"{section}.{key}: expected a number, got {value!r}")
        return None
    if integer and not isinstance(value, int):
        out.append(f"{section}.{key}: expected an integer, got {value!r}")
        return None
    if minimum is not None:
        if exclusive and not value > minimum:
            out.append(f"{section}.{key}: must be > {minimum}, got {value!r}")
            return None
        if not exclusive and not value >= minimum:
            out.append(f"{section}.{key}: must be >= {minimum}, got {value!r}")
            return None
    return value


def load_config(path, stage: str) -> tuple[dict, RunConfig, Path]:
    """Parse and validate a config file for the given stage, reporting every
    violation at once. Returns (raw document, RunConfig, dataset path)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config file: {exc}"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["config root must be a JSON object"])

    out: list[str] = []
    _check_unknown("config", doc, _SECTIONS, out)

    # dataset
    data_path = Path("")
    split = (0.7, 0.2, 0.1)
    dataset = doc.get("dataset")
    if not isinstance(dataset, dict):
        out.append("dataset: section is required")
    else:
        _check_unknown("dataset", dataset, ("path", "split"), out)
        raw = dataset.get("path")
        if not isinstance(raw, str) or not raw:
            out.append("dataset.path: required string")
        else:
            data_path = _resolve_data_path(raw)
            if not data_path.exists():
                out.append(f"dataset.path: file not found: {data_path}")
        if "split" in dataset:
            fr = dataset["split"]
            if (
                not isinstance(fr, list)
                or len(fr) != 3
                or not all(isinstance(f, (int, float)) and not isinstance(f, bool) for f in fr)
                or any(f <= 0 for f in fr)
                or sum(fr) > 1.0 + 1e-9
            ):
                out.append(f"dataset.split: expected three positive fractions summing to <= 1, got {fr!r}")
            else:
                split = tuple(float(f) for f in fr)

    # encoder
    encoder_cfg = None
    encoder = doc.get("encoder")
    if not isinstance(encoder, dict):
        out.append("encoder: section is required")
    else:
        enc_mark = len(out)
        _check_unknown("encoder", encoder, _ENCODER_KEYS, out)
        kind = encoder.get("kind")
        if kind not in ("gru", "transformer"):
            out.append(f"encoder.kind: expected 'gru' or 'transformer', got {kind!r}")
        k = _number(encoder, "encoder", "k", out, minimum=2, integer=True)
        if "k" not in encoder:
            out.append("encoder.k: required integer >= 2")
        kwargs = {}
        for key, lo in (
            ("embed_dim", 1),
            ("hidden_dim", 1),
            ("n_layers", 1),
            ("n_heads", 1),
            ("ff_dim", 1),
            ("max_len", 1),
        ):
            value = _number(encoder, "encoder", key, out, minimum=lo, integer=True)
            if value is not None:
                kwargs[key] = value
        # cross-field invariants are reported even when other sections failed
        if len(out) == enc_mark:
            try:
                encoder_cfg = EncoderConfig(kind=kind, k=k, **kwargs)
            except ValueError as exc:
                out.append(f"encoder: {exc}")

    # pretrain-tasks
    tasks: list[str] = []
    weights = None
    section = doc.get("pretrain-tasks")
    if stage == "pretrain" and section is None:
        out.append("pretrain-tasks: section is required for pretraining")
    if isinstance(section, dict):
        _check_unknown("pretrain-tasks", section, ("tasks", "weights"), out)
        raw_tasks = section.get("tasks")
        if not isinstance(raw_tasks, list) or not raw_tasks:
            out.append("pretrain-tasks.tasks: required non-empty list")
        else:
            for t in raw_tasks:
                if t not in PRETEXT_TASKS:
                    out.append(
                        f"pretrain-tasks.tasks: unknown task {t!r} "
                        f"(choose from {', '.join(PRETEXT_TASKS)})"
                    )
            if len(set(raw_tasks)) != len(raw_tasks):
                out.append("pretrain-tasks.tasks: duplicate task names")
            tasks = [t for t in raw_tasks if t in PRETEXT_TASKS]
        if "weights" in section:
            raw_w = section["weights"]
            if not isinstance(raw_w, dict):
                out.append("pretrain-tasks.weights: expected a task-to-weight object")
            else:
                for t in raw_w:
                    if t not in tasks:
                        out.append(f"pretrain-tasks.weights: weight for absent task {t!r}")
                for t in tasks:
                    if t not in raw_w:
                        out.append(f"pretrain-tasks.weights: missing weight for task {t!r}")
                try:
                    weights = MTLWeights({t: float(w) for t, w in raw_w.items()})
                except (TypeError, ValueError) as exc:
                    out.append(f"pretrain-tasks.weights: {exc}")
        elif stage == "pretrain" and len(tasks) > 1:
            out.append("pretrain-tasks.weights: required when more than one task is trained")
    elif section is not None and not isinstance(section, dict):
        out.append("pretrain-tasks: expected an object")

    # optimizer / trainer / eval
    optimizer = doc.get("optimizer", {})
    opt_kwargs = {}
    if not isinstance(optimizer, dict):
        out.append("optimizer: expected an object")
    else:
        _check_unknown("optimizer", optimizer, _OPTIMIZER_KEYS, out)
        lr = _number(optimizer, "optimizer", "lr", out, minimum=0, exclusive=True)
        wd = _number(optimizer, "optimizer", "weight_decay", out, minimum=0)
        if lr is not None:
            opt_kwargs["lr"] = float(lr)
        if wd is not None:
            opt_kwargs["weight_decay"] = float(wd)
        if "clip_norm" in optimizer:
            if optimizer["clip_norm"] is None:
                opt_kwargs["clip_norm"] = None
            else:
                cn = _number(optimizer, "optimizer", "clip_norm", out, minimum=0, exclusive=True)
                if cn is not None:
                    opt_kwargs["clip_norm"] = float(cn)

    trainer = doc.get("trainer", {})
    tr_kwargs = {}
    if not isinstance(trainer, dict):
        out.append("trainer: expected an object")
    else:
        _check_unknown("trainer", trainer, _TRAINER_KEYS, out)
        for key, lo, integer in (
            ("batch_size", 2, True),
            ("max_epochs", 1, True),
            ("patience", 1, True),
            ("mean_segment_len", 0, False),
            ("k_future", 1, True),
            ("msm_lambda", 0, False),
            ("bt_lambda", 0, False),
        ):
            value = _number(
                trainer, "trainer", key, out,
                minimum=lo, exclusive=(key == "mean_segment_len"), integer=integer,
            )
            if value is not None:
                tr_kwargs[key] = value
        if "mask_ratio" in trainer:
            mr = _number(trainer, "trainer", "mask_ratio", out, minimum=0)
            if mr is not None:
                if mr >= 1:
                    out.append(f"trainer.mask_ratio: must be < 1, got {mr!r}")
                else:
                    tr_kwargs["mask_ratio"] = float(mr)
        if "freeze_encoder" in trainer:
            fe = trainer["freeze_encoder"]
            if not isinstance(fe, bool):
                out.append(f"trainer.freeze_encoder: expected true/false, got {fe!r}")
            else:
                tr_kwargs["freeze_encoder"] = fe

    eval_section = doc.get("eval", {})
    if not isinstance(eval_section, dict):
        out.append("eval: expected an object")
    else:
        _check_unknown("eval", eval_section, ("batch_size",), out)
        eb = _number(eval_section, "eval", "batch_size", out, minimum=1, integer=True)
        if eb is not None:
            tr_kwargs["eval_batch_size"] = eb

    # seeds
    seeds = doc.get("seeds")
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
    ):
        out.append("seeds: required non-empty list of integers")
        seeds = [0]
    elif len(set(seeds)) != len(seeds):
        out.append("seeds: duplicate seed values")

    if out:
        raise ConfigError(out)

    try:
        run_config = RunConfig(
            stage=stage,
            encoder=encoder_cfg,
            tasks=tasks,
            weights=weights,
            seeds=list(seeds),
            split_fractions=split,
            **opt_kwargs,
            **tr_kwargs,
        )
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return doc, run_config, data_path


def _load_examples(path: Path):
    try:
        examples, k = load_corpus(path)
    except (OSError, ValueError, KeyError) as exc:
        rows = _count_rows(path)
        raise DataError(f"failed to read corpus {path} ({rows} rows): {exc}") from exc
    if not examples:
        raise DataError(f"corpus {path} contains no examples")
    return examples, k


def _count_rows(path: Path) -> int:
    try:
        with open(path) as fh:
            return sum(1 for _ in fh)
    except OSError:
        return 0


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def _config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:8]


def _make_run_dir(command: str, doc: dict) -> Path:
    root = _run_root()
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = f"{command}-{_config_hash(doc)}-{stamp}"
    for attempt in range(1000):
        candidate = root / (base if attempt == 0 else f"{base}-{attempt}")
        try:
            candidate.mkdir(parents=True, exist_ok=False)
        except FileExistsError:
            continue
        (candidate / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return candidate
    raise DataError(f"cannot create a unique run directory under {root}")


def _finish_run(run_dir: Path) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    (run_dir / COMPLETION_MARKER).write_text(f"completed {stamp}\n")


def _write_report(run_dir: Path, seed: int, report) -> Path:
    seed_dir = run_dir / f"seed{seed}"
    seed_dir.mkdir(exist_ok=True)
    (seed_dir / "report.csv").write_text(report.to_csv())
    (seed_dir / "summary.txt").write_text(report.summary() + "\n")
    return seed_dir


def _read_baseline(path_str: str) -> tuple[str, list[int], list[float]]:
    path = Path(path_str) / "aucs.json"
    try:
        doc = json.loads(path.read_text())
        return doc["tag"], doc["seeds"], doc["test_aucs"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read baseline AUCs from {path}: {exc}") from exc


def _write_table(run_dir: Path, tag: str, seeds, aucs, baseline) -> None:
    """Aggregate per-seed test AUCs into the result table plus a
    machine-readable aucs.json for later cross-run comparisons."""
    (run_dir / "aucs.json").write_text(
        json.dumps({"tag": tag, "seeds": list(seeds), "test_aucs": list(aucs)}, indent=2) + "\n"
    )
    if len(seeds) < 2:
        (run_dir / "table.txt").write_text(
            f"{tag}: test AUC {aucs[0]:.4f} (single seed; aggregation needs >= 2)\n"
        )
        return
    rows = []
    base_aucs = aucs
    if baseline is not None:
        base_tag, base_seeds, base_aucs = baseline
        rows.append(aggregate(base_tag, base_aucs, base_aucs))
    rows.append(aggregate(tag, aucs, base_aucs))
    table = ResultTable(rows)
    (run_dir / "table.txt").write_text(table.as_text() + "\n")
    (run_dir / "table.csv").write_text(table.as_csv())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    problems = []
    if args.k < 2:
        problems.append("--k: need at least 2 event types for label diversity")
    if args.users < 1:
        problems.append("--users: must be positive")
    if args.max_len < 1:
        problems.append("--max-len: must be positive")
    if not 1 <= args.min_len <= args.max_len:
        problems.append("--min-len: must satisfy 1 <= min-len <= max-len")
    if problems:
        raise ConfigError(problems)
    try:
        corpus = gen_synthetic(
            seed=args.seed, n_users=args.users, k=args.k,
            max_len=args.max_len, min_len=args.min_len,
        )
    except ValueError as exc:
        raise ConfigError([f"generation rejected: {exc}"]) from exc
    out = _resolve_data_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, corpus, args.k)
    print(f"wrote {len(corpus)} examples (K={args.k}) to {out}")
    return EXIT_OK


def cmd_ingest_taobao(args) -> int:
    csv_path = _resolve_data_path(args.csv)
    if not csv_path.exists():
        raise DataError(f"input file not found: {csv_path}")
    stats = IngestStats()
    try:
        examples = ingest_taobao(
            csv_path,
            max_len=args.max_len,
            label_window_fraction=args.window_frac,
            stats=stats,
        )
    except ValueError as exc:
        raise DataError(f"ingestion failed ({stats.rows_total} rows): {exc}") from exc
    if not examples:
        raise DataError(f"ingestion produced no usable histories ({stats.rows_total} rows)")
    out = _resolve_data_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, examples, max(TAOBAO_EVENT_TYPES.values()))
    print(
        f"rows read:      {stats.rows_total}\n"
        f"rows rejected:  {stats.rows_rejected}\n"
        f"users seen:     {stats.users_total}\n"
        f"users dropped:  {stats.users_dropped}\n"
        f"examples kept:  {len(examples)}\n"
        f"wrote {out}"
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    path = _resolve_data_path(args.data)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    examples, k = _load_examples(path)
    report = diagnostics(examples)
    print(f"corpus:              {path} (K={k})")
    print(report.as_text())
    return EXIT_OK


def cmd_pretrain(args) -> int:
    doc, config, data_path = load_config(args.config, stage="pretrain")
    examples, k = _load_examples(data_path)
    if k != config.encoder.k:
        raise DataError(f"corpus has K={k} but encoder.k={config.encoder.k}")
    run_dir = _make_run_dir("pretrain", doc)
    reports = []
    for seed in config.seeds:
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        report, _ = pretrain(config, examples, seed, checkpoint_out=seed_dir / "checkpoint.npz")
        _write_report(run_dir, seed, report)
        reports.append(report)
        print(report.summary())
        print()
    (run_dir / "curves.csv").write_text(export_curves(reports))
    _finish_run(run_dir)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _resolve_per_seed(path_str: str, seeds, filename: str) -> dict[int, Path]:
    """A run directory maps to its per-seed files; a single file serves
    every seed."""
    path = Path(path_str)
    if path.is_dir():
        resolved = {seed: path / f"seed{seed}" / filename for seed in seeds}
        missing = [str(p) for p in resolved.values() if not p.exists()]
        if missing:
            raise DataError(f"missing per-seed files: {', '.join(missing)}")
        return resolved
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return {seed: path for seed in seeds}


def cmd_finetune(args) -> int:
    doc, config, data_path = load_config(args.config, stage="finetune")
    examples, k = _load_examples(data_path)
    if k != config.encoder.k:
        raise DataError(f"corpus has K={k} but encoder.k={config.encoder.k}")
    checkpoints = (
        _resolve_per_seed(args.checkpoint, config.seeds, "checkpoint.npz")
        if args.checkpoint
        else {seed: None for seed in config.seeds}
    )
    baseline = _read_baseline(args.baseline) if args.baseline else None
    run_dir = _make_run_dir("finetune", doc)
    reports = []
    for seed in config.seeds:
        report, arrays = finetune(config, examples, seed, checkpoint=checkpoints[seed])
        seed_dir = _write_report(run_dir, seed, report)
        save_checkpoint(
            seed_dir / "model.npz",
            config.encoder.fingerprint(),
            arrays,
            meta={"stage": "finetune", "seed": seed},
        )
        reports.append(report)
        print(report.summary())
        print()
    (run_dir / "curves.csv").write_text(export_curves(reports))
    _write_table(
        run_dir,
        reports[0].tag,
        config.seeds,
        [r.test_auc for r in reports],
        baseline,
    )
    _finish_run(run_dir)
    print((run_dir / "table.txt").read_text().rstrip())
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    doc, config, data_path = load_config(args.config, stage="finetune")
    examples, k = _load_examples(data_path)
    if k != config.encoder.k:
        raise DataError(f"corpus has K={k} but encoder.k={config.encoder.k}")
    models = _resolve_per_seed(args.model, config.seeds, "model.npz")
    baseline = _read_baseline(args.baseline) if args.baseline else None
    split = time_split(examples, config.split_fractions)
    run_dir = _make_run_dir("evaluate", doc)
    labels = np.array([ex.label for ex in split.test])
    aucs = []
    for seed in config.seeds:
        meta, arrays = load_checkpoint(
            models[seed], expected_fingerprint=config.encoder.fingerprint()
        )
        params = {name: nc.Param(name, arr.copy()) for name, arr in arrays.items()
                  if not name.startswith("head_")}
        head = head_from_arrays("finetune", arrays)
        scores = score_examples(config, params, head, split.test)
        aucs.append(auc(labels, scores))
        print(f"seed {seed}: test AUC {aucs[-1]:.6f} ({models[seed]})")
    _write_table(run_dir, "evaluate", config.seeds, aucs, baseline)
    _finish_run(run_dir)
    print((run_dir / "table.txt").read_text().rstrip())
    print(f"run directory: {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqssl",
        description="Self-supervised pretraining for event-sequence user models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=20000)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--min-len", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("ingest-taobao", help="ingest a UserBehavior CSV into a corpus file")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--window-frac", type=float, default=0.125)
    p.set_defaults(func=cmd_ingest_taobao)

    p = sub.add_parser("diagnose", help="print corpus distribution diagnostics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pretrain", help="run multi-task pretraining for every seed")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune on purchase labels for every seed")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="pretrain run directory or checkpoint file")
    p.add_argument("--baseline", help="previous run directory for the delta column")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score saved finetuned models on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, help="finetune run directory or model file")
    p.add_argument("--baseline", help="previous run directory for the delta column")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nc.NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
