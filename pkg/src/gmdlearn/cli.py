"""Command-line entry point.

    gmd generate --config run.toml [--out DIR]
    gmd train    --config run.toml [--out DIR] [--seed-override N] [--quiet]
    gmd eval     --config run.toml [--out DIR]
    gmd diag     RECORDS_DIR [--config run.toml] [--out DIR]

Exit codes: 0 success, 1 invalid input, 2 numerical failure during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import tomli_w

from . import __version__
from .autodiff import NumericalError
from .config import ConfigError, RunConfig, load_config
from .data import write_tabular
from .diagnostics import DEFAULT_WINDOW, load_records, write_diagnostics
from .model import loads_models
from .trainer import evaluate_all_cases, run_experiment

log = logging.getLogger("gmdlearn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _versions() -> dict:
    return {"gmdlearn": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _manifest(cfg: RunConfig, command: str, **extra) -> dict:
    info = {
        "command": command,
        "config": cfg.resolved(),
        "section_hashes": cfg.section_hashes(),
        "versions": _versions(),
    }
    info.update(extra)
    return info


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_seeds([args.seed_override])
    if args.out is not None:
        cfg = cfg.with_output(args.out)
    out = Path(cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_generate(args) -> int:
    cfg, out = _prepare(args)
    if cfg.data.source != "synthetic":
        raise ConfigError("data.source: generate needs a synthetic data section")
    start = time.perf_counter()
    dataset = cfg.data.load()
    schema = write_tabular(dataset, out, "dataset")
    data_section = {
        "data": {
            "source": "file",
            "path": "dataset.csv",
            "schema": {
                "modality_cols": [f"cols {a}..{b}" for a, b in schema.modality_cols],
                "target_col": schema.target_col,
                "delimiter": schema.delimiter,
                "splits": dict(schema.splits),
                "task": schema.task,
            },
        }
    }
    (out / "schema.toml").write_text(tomli_w.dumps(data_section))
    (out / "config.toml").write_text(cfg.to_toml())
    _write_json(
        out / "manifest.json",
        _manifest(cfg, "generate", seed=cfg.data.resolved["seed"], wall_time_s=round(time.perf_counter() - start, 3)),
    )
    log.info("wrote %d rows to %s", len(dataset.target), out / "dataset.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    train_cfg = cfg.train_config()
    dataset = cfg.data.load()
    spec = cfg.model_spec(dataset)
    start = time.perf_counter()
    artifacts = run_experiment(train_cfg, spec, dataset)
    (out / "config.toml").write_text(cfg.to_toml())
    artifacts.write(out, _manifest(cfg, "train", wall_time_s=round(time.perf_counter() - start, 3)))
    for row, mean, std, n in artifacts.summary():
        if row == "avg" or row.startswith("missing"):
            log.info("%-10s %s %.4f +- %.4f (n=%d)", row, train_cfg.metric, mean, std, n)
    if not artifacts.ok:
        for s in artifacts.seeds:
            if s.status != "ok":
                print(f"error: {s.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    model_path = Path(cfg.eval.get("model") or Path(cfg.output["dir"]) / "model.bin")
    if not model_path.exists():
        raise ConfigError(f"eval.model: no model artifact at {model_path}")
    models = loads_models(model_path.read_bytes())
    dataset = cfg.data.load()
    split = cfg.eval["split"]
    if split not in dataset.splits:
        raise ConfigError(f"eval.split: unknown split {split!r}")
    inputs, targets = dataset.subset(split)
    metric = "accuracy" if dataset.is_classification else "mse"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "case_mask", "metric_name", "value"])
    for seed, model in sorted(models.items()):
        if model.spec.modality_dims != dataset.dims:
            raise ConfigError(
                f"eval.model: model expects modality widths {model.spec.modality_dims}, dataset has {dataset.dims}"
            )
        table = evaluate_all_cases(model, inputs, targets, metric, cfg.eval["pool"])
        for case, value in table.rows:
            w.writerow([seed, str(case), f"{split}_{metric}", repr(value)])
    (out / "eval.csv").write_text(buf.getvalue())
    log.info("wrote %s", out / "eval.csv")
    return EXIT_OK


def cmd_diag(args) -> int:
    window = DEFAULT_WINDOW
    if args.config is not None:
        window = load_config(args.config).diagnostics["window"]
    records = load_records(args.records)
    out = Path(args.out) if args.out is not None else Path(args.records)
    if out.suffix == ".jsonl":
        out = out.parent
    for path in write_diagnostics(records, out, window):
        log.info("wrote %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmd", description="Missing-modality training with gradient decoupling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    p = sub.add_parser("generate", help="write a synthetic dataset to disk")
    common(p)
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("train", help="train every seed and write run artifacts")
    common(p)
    p.add_argument("--seed-override", type=int, help="train this single seed instead of train.seeds")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="evaluate a saved model on every case of a pool")
    common(p)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("diag", help="diagnostic tables from training records")
    p.add_argument("records", help="run directory or conflicts.jsonl file")
    common(p, config_required=False)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
