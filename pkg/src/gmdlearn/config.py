"""Run configuration: one TOML file with explicit sections.

Every key is validated before any work starts and unknown keys are rejected.
The resolved form (all defaults filled in, paths made absolute) is what gets
echoed into the output directory; running from the echo reproduces the run.
See ``configs/example.toml`` in the repository for an annotated example.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .cases import CaseSampler, SamplerConfig, enumerate_cases
from .data import DominanceSpec, MultimodalDataset, TabularSchema, generate, load_tabular, parse_columns
from .model import FUSIONS, LOSSES, ModelSpec
from .trainer import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


SECTIONS = ("data", "model", "train", "output", "eval", "diagnostics")


# typed field readers ----------------------------------------------------------------


class _Section:
    def __init__(self, table: Any, path: str, allowed: set[str]):
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: expected a table")
        unknown = sorted(set(table) - allowed)
        if unknown:
            raise ConfigError(f"{path}.{unknown[0]}: unknown key")
        self.table = table
        self.path = path

    def key(self, name: str) -> str:
        return f"{self.path}.{name}"

    def get(self, name: str, kind, default=None, required: bool = False):
        if name not in self.table:
            if required:
                raise ConfigError(f"{self.key(name)}: required key is missing")
            return default
        value = self.table[name]
        try:
            return kind(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.key(name)}: {exc}") from None


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _list_of(kind):
    def read(v):
        if not isinstance(v, list):
            raise ValueError(f"expected an array, got {v!r}")
        return [kind(x) for x in v]

    return read


def _float_or_list(v):
    return _list_of(_float)(v) if isinstance(v, list) else _float(v)


def _int_or_list(v):
    return _list_of(_int)(v) if isinstance(v, list) else _int(v)


def _layers(v):
    if not isinstance(v, list) or not v:
        raise ValueError(f"expected a non-empty array of [width, activation] pairs, got {v!r}")
    out = []
    for item in v:
        if not (isinstance(item, list) and len(item) == 2):
            raise ValueError(f"expected [width, activation], got {item!r}")
        out.append((_int(item[0]), _str(item[1])))
    return out


def _column(v):
    if isinstance(v, str):
        a, b = parse_columns(v)
        if a != b:
            raise ValueError(f"expected a single column, got {v!r}")
        return a
    return _int(v)


# sections ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    source: str
    resolved: dict

    def load(self) -> MultimodalDataset:
        r = self.resolved
        if self.source == "synthetic":
            spec = DominanceSpec(
                tuple(r["signal_strength"]), _tuple_or(r["noise_std"]), r["redundancy"], _tuple_or(r["feature_scale"])
            )
            return generate(spec, r["n_samples"], r["n_classes"], _tuple_or(r["dims"]), r["seed"], tuple(r["splits"]))
        return load_tabular(r["path"], self.schema())

    def schema(self) -> TabularSchema:
        s = self.resolved["schema"]
        splits = s["splits"]
        return TabularSchema(
            modality_cols=tuple(parse_columns(c) for c in s["modality_cols"]),
            target_col=s["target_col"],
            delimiter=s["delimiter"],
            splits=dict(splits) if isinstance(splits, dict) else tuple(splits),
            task=s["task"],
            split_seed=s["split_seed"],
        )

    @property
    def n_modalities(self) -> int | None:
        """Known without reading data for synthetic sources and schemas."""
        if self.source == "synthetic":
            return len(self.resolved["signal_strength"])
        return len(self.resolved["schema"]["modality_cols"])

    @property
    def task(self) -> str:
        return "classification" if self.source == "synthetic" else self.resolved["schema"]["task"]


def _tuple_or(v):
    return tuple(v) if isinstance(v, list) else v


def _read_data(table, base: Path) -> DataConfig:
    sec = _Section(
        table,
        "data",
        {"source", "signal_strength", "noise_std", "redundancy", "feature_scale", "n_samples", "n_classes", "dims",
         "seed", "splits", "path", "schema"},
    )
    source = sec.get("source", _str, required=True)
    if source == "synthetic":
        for k in ("path", "schema"):
            if k in table:
                raise ConfigError(f"data.{k}: not allowed with source = 'synthetic'")
        r = {
            "source": source,
            "signal_strength": sec.get("signal_strength", _list_of(_float), required=True),
            "noise_std": sec.get("noise_std", _float_or_list, 1.0),
            "redundancy": sec.get("redundancy", _float, 0.5),
            "feature_scale": sec.get("feature_scale", _float_or_list, 1.0),
            "n_samples": sec.get("n_samples", _int, 2000),
            "n_classes": sec.get("n_classes", _int, 4),
            "dims": sec.get("dims", _int_or_list, 8),
            "seed": sec.get("seed", _int, 0),
            "splits": sec.get("splits", _list_of(_float), [0.6, 0.2, 0.2]),
        }
        try:
            DominanceSpec(tuple(r["signal_strength"]), _tuple_or(r["noise_std"]), r["redundancy"], _tuple_or(r["feature_scale"]))
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from None
        for k in ("n_samples", "n_classes"):
            if r[k] < (2 if k == "n_classes" else 1):
                raise ConfigError(f"data.{k}: too small ({r[k]})")
        dims = r["dims"] if isinstance(r["dims"], list) else [r["dims"]] * len(r["signal_strength"])
        if len(dims) != len(r["signal_strength"]) or any(d < 1 for d in dims):
            raise ConfigError(f"data.dims: need one positive width per modality, got {r['dims']}")
        if len(r["splits"]) != 3 or any(f < 0 for f in r["splits"]) or abs(sum(r["splits"]) - 1) > 1e-9:
            raise ConfigError(f"data.splits: need three non-negative fractions summing to 1, got {r['splits']}")
        return DataConfig(source, r)
    if source != "file":
        raise ConfigError(f"data.source: expected 'synthetic' or 'file', got {source!r}")
    for k in ("signal_strength", "noise_std", "redundancy", "feature_scale", "n_samples", "n_classes", "dims", "seed", "splits"):
        if k in table:
            raise ConfigError(f"data.{k}: not allowed with source = 'file'")
    path = Path(sec.get("path", _str, required=True))
    if not path.is_absolute():
        path = (base / path).resolve()
    ssec = _Section(sec.get("schema", lambda v: v, required=True), "data.schema",
                    {"modality_cols", "target_col", "delimiter", "splits", "task", "split_seed"})
    splits = ssec.get("splits", lambda v: v, [0.6, 0.2, 0.2])
    if isinstance(splits, dict):
        files = {}
        for name, p in splits.items():
            p = Path(_str_key(p, f"data.schema.splits.{name}"))
            files[name] = str(p if p.is_absolute() else (path.parent / p).resolve())
        splits = files
    else:
        splits = ssec.get("splits", _list_of(_float))
    schema = {
        "modality_cols": ssec.get("modality_cols", _list_of(_str), required=True),
        "target_col": ssec.get("target_col", _column, required=True),
        "delimiter": ssec.get("delimiter", _str, ","),
        "splits": splits,
        "task": ssec.get("task", _str, "classification"),
        "split_seed": ssec.get("split_seed", _int, 0),
    }
    cfg = DataConfig(source, {"source": source, "path": str(path), "schema": schema})
    try:
        cfg.schema()
    except ValueError as exc:
        raise ConfigError(f"data.schema: {exc}") from None
    return cfg


def _str_key(v, key):
    if not isinstance(v, str):
        raise ConfigError(f"{key}: expected a path string, got {v!r}")
    return v


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    model: dict
    train: dict
    output: dict
    eval: dict
    diagnostics: dict
    source: Path | None = field(default=None, compare=False)

    def resolved(self) -> dict:
        # TOML has no null; a dropped key parses back to the same default.
        return _drop_none({
            "data": self.data.resolved,
            "model": self.model,
            "train": self.train,
            "output": self.output,
            "eval": self.eval,
            "diagnostics": self.diagnostics,
        })

    def section_hashes(self) -> dict[str, str]:
        return {k: _hash(v) for k, v in self.resolved().items()}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.resolved())

    def model_spec(self, dataset: MultimodalDataset) -> ModelSpec:
        m = self.model
        head = m["head"]
        if head is None:
            head = [[dataset.n_classes if dataset.is_classification else 1, "identity"]]
        try:
            return ModelSpec(
                tuple(dataset.dims),
                m["hidden_dim"],
                tuple(map(tuple, m["encoder"])),
                tuple(map(tuple, m["backbone"])),
                tuple(map(tuple, head)),
                m["fusion"],
            )
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t["steps"],
            batch_size=t["batch_size"],
            optimizer=OptimizerConfig(**t["optimizer"]),
            gmd_enabled=t["gmd"],
            sampler=SamplerConfig(t["k"], t["pool"], t["include_full"]),
            loss=t["loss"],
            seeds=tuple(t["seeds"]),
            eval_every=t["eval_every"],
        )

    def with_seeds(self, seeds) -> RunConfig:
        train = dict(self.train, seeds=[int(s) for s in seeds])
        return RunConfig(self.data, self.model, train, self.output, self.eval, self.diagnostics, self.source)

    def with_output(self, out_dir) -> RunConfig:
        output = dict(self.output, dir=str(Path(out_dir).resolve()))
        return RunConfig(self.data, self.model, self.train, output, self.eval, self.diagnostics, self.source)


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _read_model(table) -> dict:
    sec = _Section(table, "model", {"hidden_dim", "encoder", "backbone", "head", "fusion"})
    hidden = sec.get("hidden_dim", _int, 16)
    m = {
        "hidden_dim": hidden,
        "encoder": [list(x) for x in sec.get("encoder", _layers, [(hidden, "relu")])],
        "backbone": [list(x) for x in sec.get("backbone", _layers, [(hidden, "relu")])],
        "head": None,
        "fusion": sec.get("fusion", _str, "mean"),
    }
    head = sec.get("head", _layers)
    if head is not None:
        m["head"] = [list(x) for x in head]
    if m["fusion"] not in FUSIONS:
        raise ConfigError(f"model.fusion: expected one of {FUSIONS}, got {m['fusion']!r}")
    try:
        ModelSpec((1,), hidden, tuple(map(tuple, m["encoder"])), tuple(map(tuple, m["backbone"])),
                  tuple(map(tuple, m["head"] or [[2, "identity"]])), m["fusion"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    return m


def _read_train(table, task: str) -> dict:
    sec = _Section(table, "train",
                   {"steps", "batch_size", "gmd", "loss", "seeds", "eval_every", "k", "pool", "include_full", "optimizer"})
    opt = _Section(sec.get("optimizer", lambda v: v, {}), "train.optimizer",
                   {"name", "lr", "momentum", "beta1", "beta2", "eps"})
    t = {
        "steps": sec.get("steps", _int, 1000),
        "batch_size": sec.get("batch_size", _int, 64),
        "gmd": sec.get("gmd", _bool, True),
        "loss": sec.get("loss", _str, "cross_entropy" if task == "classification" else "mse"),
        "seeds": sec.get("seeds", _list_of(_int), [0]),
        "eval_every": sec.get("eval_every", _int, 0),
        "k": sec.get("k", _int, 5),
        "pool": sec.get("pool", _str, "all"),
        "include_full": sec.get("include_full", _bool, True),
        "optimizer": {
            "name": opt.get("name", _str, "adam"),
            "lr": opt.get("lr", _float, 1e-3),
            "momentum": opt.get("momentum", _float, 0.0),
            "beta1": opt.get("beta1", _float, 0.9),
            "beta2": opt.get("beta2", _float, 0.999),
            "eps": opt.get("eps", _float, 1e-8),
        },
    }
    checks = [
        ("steps", t["steps"] >= 1, "must be >= 1"),
        ("batch_size", t["batch_size"] >= 1, "must be >= 1"),
        ("seeds", len(t["seeds"]) >= 1 and len(set(t["seeds"])) == len(t["seeds"]), "needs distinct seeds"),
        ("eval_every", t["eval_every"] >= 0, "must be >= 0"),
        ("loss", t["loss"] in LOSSES, f"expected one of {LOSSES}"),
        ("optimizer.lr", t["optimizer"]["lr"] > 0, "must be > 0"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"train.{key}: {msg}")
    if t["loss"] == "cross_entropy" and task != "classification":
        raise ConfigError("train.loss: cross_entropy needs a classification task")
    try:
        OptimizerConfig(**t["optimizer"])
    except ValueError as exc:
        raise ConfigError(f"train.optimizer: {exc}") from None
    try:
        SamplerConfig(t["k"], t["pool"], t["include_full"])
    except ValueError as exc:
        raise ConfigError(f"train.pool: {exc}") from None
    if t["gmd"] and t["k"] < 2:
        raise ConfigError("train.k: decoupling needs at least 2 cases per step")
    return t


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent.resolve(), path)


def parse_config(raw: dict, base: Path = Path("."), source: Path | None = None) -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    if "data" not in raw:
        raise ConfigError("data: required section is missing")
    data = _read_data(raw["data"], base)
    model = _read_model(raw.get("model", {}))
    train = _read_train(raw.get("train", {}), data.task)
    m = data.n_modalities
    try:
        CaseSampler(SamplerConfig(train["k"], train["pool"], train["include_full"]), m)
    except ValueError as exc:
        key = "train.k" if "exceeds the pool size" in str(exc) else "train.pool"
        raise ConfigError(f"{key}: {exc}") from None

    out = _Section(raw.get("output", {}), "output", {"dir"})
    out_dir = out.get("dir", _str, "runs/default")
    output = {"dir": str(Path(out_dir) if Path(out_dir).is_absolute() else (base / out_dir).resolve())}

    ev = _Section(raw.get("eval", {}), "eval", {"model", "pool", "split"})
    model_path = ev.get("model", _str)
    if model_path is not None and not Path(model_path).is_absolute():
        model_path = str((base / model_path).resolve())
    evaluation = {"pool": ev.get("pool", _str, "all"), "split": ev.get("split", _str, "test")}
    if model_path is not None:
        evaluation["model"] = model_path
    try:
        enumerate_cases(m, evaluation["pool"])
    except ValueError as exc:
        raise ConfigError(f"eval.pool: {exc}") from None

    dg = _Section(raw.get("diagnostics", {}), "diagnostics", {"window"})
    diagnostics = {"window": dg.get("window", _int, 100)}
    if diagnostics["window"] < 1:
        raise ConfigError("diagnostics.window: must be >= 1")
    return RunConfig(data, model, train, output, evaluation, diagnostics, source)
