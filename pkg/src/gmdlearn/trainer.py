"""Training loop: per-step case sampling, per-case gradients, decoupling of the
shared-backbone gradients, reduction and one optimizer update.

All randomness is keyed by ``(seed, stream, step)``, so a run is a pure
function of its configuration and can resume from any step.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import base64
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import GradientVector, NumericalError
from .cases import CaseSampler, ModalityCase, SamplerConfig, enumerate_cases
from .data import MultimodalDataset
from .gmd import ConflictReport, conflict_report, gmd_all, reduce
from .model import LOSSES, DsModel, ModelSpec, dumps_models, forward_case, init_model, loads_models

log = logging.getLogger(__name__)

BATCH_STREAM = 0xBA7C
SHARED = "shared"


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}; expected sgd or adam")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or not self.eps > 0:
            raise ValueError("adam needs 0 <= beta1, beta2 < 1 and eps > 0")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    optimizer: OptimizerConfig = OptimizerConfig()
    gmd_enabled: bool = True
    sampler: SamplerConfig = SamplerConfig()
    loss: str = "cross_entropy"
    seeds: tuple[int, ...] = (0,)
    eval_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.gmd_enabled and self.sampler.k < 2:
            raise ValueError("GMD compares pairs of cases; k must be >= 2 when it is enabled")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    @property
    def metric(self) -> str:
        return "accuracy" if self.loss == "cross_entropy" else "mse"


# optimizers ---------------------------------------------------------------------


def init_optimizer_state(cfg: OptimizerConfig, model) -> dict[str, dict[str, np.ndarray]]:
    state = {}
    for gid, flat in model.flat().items():
        if cfg.name == "sgd":
            state[gid] = {"velocity": np.zeros_like(flat)}
        else:
            state[gid] = {"m": np.zeros_like(flat), "v": np.zeros_like(flat)}
    return state


def optimizer_update(cfg: OptimizerConfig, params: np.ndarray, grad: np.ndarray, slots: dict, t: int):
    """One update of a flat parameter vector; ``t`` counts updates from 1."""
    if cfg.name == "sgd":
        if cfg.momentum == 0:
            return params - cfg.lr * grad, slots
        velocity = cfg.momentum * slots["velocity"] + grad
        return params - cfg.lr * velocity, {"velocity": velocity}
    m = cfg.beta1 * slots["m"] + (1 - cfg.beta1) * grad
    v = cfg.beta2 * slots["v"] + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    return params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), {"m": m, "v": v}


# state ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: DsModel
    opt_state: dict[str, dict[str, np.ndarray]]
    seed: int
    step: int = 0

    @classmethod
    def initial(cls, spec: ModelSpec, cfg: TrainConfig, seed: int) -> TrainState:
        model = init_model(spec, seed)
        return cls(model, init_optimizer_state(cfg.optimizer, model), seed)

    def to_bytes(self) -> bytes:
        payload = {
            "model": base64.b64encode(dumps_models({self.seed: self.model})).decode(),
            "opt_state": {g: {k: v.tolist() for k, v in s.items()} for g, s in self.opt_state.items()},
            "seed": self.seed,
            "step": self.step,
        }
        return json.dumps(payload, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, blob: bytes) -> TrainState:
        payload = json.loads(blob)
        model = loads_models(base64.b64decode(payload["model"]))[payload["seed"]]
        opt = {g: {k: np.array(v, dtype=np.float64) for k, v in s.items()} for g, s in payload["opt_state"].items()}
        return cls(model, opt, payload["seed"], payload["step"])


@dataclass
class StepRecord:
    step: int
    cases: list[ModalityCase]
    losses: list[float]
    report: ConflictReport
    shared_grads: list[GradientVector] = field(repr=False, default_factory=list)
    calibrated: list[GradientVector] = field(repr=False, default_factory=list)

    def to_json(self, seed: int) -> str:
        return self.report.to_json(seed=seed, step=self.step, losses=self.losses)


def draw_batch(dataset: MultimodalDataset, seed: int, step: int, batch_size: int):
    train = dataset.splits["train"]
    if train.size == 0:
        raise ValueError("the train split is empty")
    rng = np.random.default_rng([seed, BATCH_STREAM, step])
    idx = train[rng.choice(train.size, size=min(batch_size, train.size), replace=False)]
    return dataset.subset(idx)


def _group_used(model, gid: str, case: ModalityCase) -> bool:
    used = getattr(model, "group_used", None)
    if used is not None:
        return used(gid, case)
    if gid.startswith("encoder"):
        return int(gid[len("encoder") :]) in case
    return True


def train_step(state: TrainState, batch, cfg: TrainConfig, sampler: CaseSampler | None = None):
    """Advance ``state`` by one optimizer update. Returns ``(new_state, StepRecord)``."""
    model = state.model
    if sampler is None:
        sampler = CaseSampler(cfg.sampler.with_seed(state.seed), model.n_modalities)
    inputs, targets = batch
    cases = sampler.draw(state.step)
    try:
        per_case = [model.grad_case(inputs, targets, case, cfg.loss) for case in cases]
        shared = [(c.case, c.grads[SHARED]) for c in per_case]
        if cfg.gmd_enabled:
            calibrated, report = gmd_all(shared)
        else:
            report = conflict_report(shared)
            report.post_cos_matrix = report.cos_matrix.copy()
            calibrated = [g for _, g in shared]
        reduced = {SHARED: reduce(calibrated).values}
        for gid in model.params:
            if gid == SHARED:
                continue
            total = None
            for c in per_case:
                if _group_used(model, gid, c.case):
                    g = c.grads[gid].values
                    total = g.copy() if total is None else total + g
            reduced[gid] = total if total is not None else np.zeros(model.params[gid].size)
        t = state.step + 1
        flat = model.flat()
        new_flat, new_opt = {}, {}
        for gid, p in flat.items():
            new_flat[gid], new_opt[gid] = optimizer_update(cfg.optimizer, p, reduced[gid], state.opt_state[gid], t)
            if not np.isfinite(new_flat[gid]).all():
                raise NumericalError(f"non-finite parameters in group {gid!r}")
    except NumericalError as exc:
        raise NumericalError(f"seed {state.seed}, step {state.step}: {exc}") from exc
    record = StepRecord(
        step=state.step,
        cases=cases,
        losses=[c.loss for c in per_case],
        report=report,
        shared_grads=[g for _, g in shared],
        calibrated=list(calibrated),
    )
    return TrainState(model.with_flat(new_flat), new_opt, state.seed, t), record


# evaluation ----------------------------------------------------------------------


@dataclass
class CaseTable:
    metric: str
    rows: list[tuple[ModalityCase, float]]

    @property
    def by_missing(self) -> dict[int, float]:
        groups: dict[int, list[float]] = {}
        for case, value in self.rows:
            groups.setdefault(case.n_missing, []).append(value)
        return {d: float(np.mean(v)) for d, v in sorted(groups.items(), reverse=True)}

    @property
    def mean(self) -> float:
        return float(np.mean([v for _, v in self.rows]))

    def __getitem__(self, case) -> float:
        key = str(case)
        for c, v in self.rows:
            if str(c) == key:
                return v
        raise KeyError(key)

    def as_dict(self) -> dict[str, float]:
        return {str(c): v for c, v in self.rows}


def score(pred: np.ndarray, target: np.ndarray, metric: str) -> float:
    if metric == "accuracy":
        return float(np.mean(pred.argmax(axis=1) == target))
    if metric == "mse":
        return float(np.mean((pred - np.asarray(target, float).reshape(pred.shape)) ** 2))
    raise ValueError(f"unknown metric {metric!r}")


def evaluate_all_cases(model: DsModel, inputs, targets, metric: str = "accuracy", pool="all") -> CaseTable:
    """Metric for every case of ``pool`` (all ``2**M - 1`` subsets by default)."""
    rows = []
    for case in enumerate_cases(model.n_modalities, pool):
        pred = forward_case(model, inputs, case)[0].data
        rows.append((case, score(pred, targets, metric)))
    return CaseTable(metric, rows)


# experiments ---------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    status: str
    final: CaseTable | None = None
    model: DsModel | None = None
    error: str | None = None
    wall_time: float = 0.0


@dataclass
class RunArtifacts:
    metric: str
    metrics_rows: list[tuple[int, int, str, str, float]]
    conflict_lines: list[str]
    seeds: list[SeedResult]

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.seeds)

    def models(self) -> dict[int, DsModel]:
        return {s.seed: s.model for s in self.seeds if s.model is not None}

    def summary(self) -> list[tuple[str, float, float, int]]:
        """Across-seed ``(row, mean, std, n)`` of the final metric; rows are case
        masks, then ``missingD`` aggregates, then ``avg``."""
        done = [s.final for s in self.seeds if s.final is not None]
        if not done:
            return []
        keyed: dict[str, list[float]] = {}
        for table in done:
            for case, value in table.rows:
                keyed.setdefault(str(case), []).append(value)
            for d, value in table.by_missing.items():
                keyed.setdefault(f"missing{d}", []).append(value)
            keyed.setdefault("avg", []).append(table.mean)
        return [(k, float(np.mean(v)), float(np.std(v)), len(v)) for k, v in keyed.items()]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "step", "case_mask", "metric_name", "value"])
        for seed, step, case, name, value in self.metrics_rows:
            w.writerow([seed, step, case, name, repr(value)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "metric_name", "mean", "std", "n_seeds"])
        for row, mean, std, n in self.summary():
            w.writerow([row, f"test_{self.metric}", repr(mean), repr(std), n])
        return buf.getvalue()

    def write(self, out_dir, manifest: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "summary.csv").write_text(self.summary_csv())
        (out / "conflicts.jsonl").write_text("".join(line + "\n" for line in self.conflict_lines))
        (out / "model.bin").write_bytes(dumps_models(self.models()))
        info = dict(manifest or {})
        info["status"] = "ok" if self.ok else "failed"
        info["seeds"] = [
            {"seed": s.seed, "status": s.status, "error": s.error, "wall_time_s": round(s.wall_time, 3)}
            for s in self.seeds
        ]
        (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return out


def _eval_rows(seed, step, table: CaseTable, name: str):
    return [(seed, step, str(case), name, value) for case, value in table.rows]


def train_seed(
    spec: ModelSpec,
    dataset: MultimodalDataset,
    cfg: TrainConfig,
    seed: int,
    on_step: Callable[[StepRecord], None] | None = None,
    state: TrainState | None = None,
):
    """Train one seed to ``cfg.steps``; returns ``(state, metric rows, conflict lines)``."""
    if spec.n_modalities != dataset.n_modalities:
        raise ValueError(f"model has {spec.n_modalities} modalities, dataset has {dataset.n_modalities}")
    state = state or TrainState.initial(spec, cfg, seed)
    sampler = CaseSampler(cfg.sampler.with_seed(seed), spec.n_modalities)
    rows, lines = [], []
    val_inputs, val_targets = dataset.subset("val")
    while state.step < cfg.steps:
        batch = draw_batch(dataset, seed, state.step, cfg.batch_size)
        state, record = train_step(state, batch, cfg, sampler)
        lines.append(record.to_json(seed))
        if on_step is not None:
            on_step(record)
        if cfg.eval_every and state.step % cfg.eval_every == 0 and state.step < cfg.steps and len(val_targets):
            table = evaluate_all_cases(state.model, val_inputs, val_targets, cfg.metric)
            rows += _eval_rows(seed, state.step, table, f"val_{cfg.metric}")
            log.info("seed %d step %d val %s avg %.4f", seed, state.step, cfg.metric, table.mean)
    return state, rows, lines


def run_experiment(
    cfg: TrainConfig,
    spec: ModelSpec,
    dataset: MultimodalDataset,
    on_step: Callable[[int, StepRecord], None] | None = None,
) -> RunArtifacts:
    """Train and evaluate every seed in ``cfg.seeds``; a numerical failure marks
    that seed as failed instead of aborting the others."""
    rows, lines, results = [], [], []
    test_inputs, test_targets = dataset.subset("test")
    for seed in cfg.seeds:
        start = time.perf_counter()
        hook = (lambda rec, s=seed: on_step(s, rec)) if on_step else None
        try:
            state, seed_rows, seed_lines = train_seed(spec, dataset, cfg, seed, hook)
        except NumericalError as exc:
            log.error("seed %d failed: %s", seed, exc)
            results.append(SeedResult(seed, "failed", error=str(exc), wall_time=time.perf_counter() - start))
            continue
        final = evaluate_all_cases(state.model, test_inputs, test_targets, cfg.metric)
        rows += seed_rows + _eval_rows(seed, cfg.steps, final, f"test_{cfg.metric}")
        lines += seed_lines
        results.append(SeedResult(seed, "ok", final, state.model, wall_time=time.perf_counter() - start))
        log.info("seed %d done: test %s avg %.4f", seed, cfg.metric, final.mean)
    return RunArtifacts(cfg.metric, rows, lines, results)


def with_gmd(cfg: TrainConfig, enabled: bool) -> TrainConfig:
    return replace(cfg, gmd_enabled=enabled)


@dataclass
class AblationRow:
    pool: str
    artifacts: RunArtifacts

    def values(self) -> dict[str, tuple[float, float]]:
        return {row: (mean, std) for row, mean, std, _ in self.artifacts.summary()}


def pool_ablation(cfg: TrainConfig, spec: ModelSpec, dataset: MultimodalDataset, pools) -> list[AblationRow]:
    """One run per pool policy with everything else held fixed."""
    return [AblationRow(pool, run_experiment(replace(cfg, sampler=replace(cfg.sampler, pool=pool)), spec, dataset)) for pool in pools]


def ablation_csv(rows: list[AblationRow]) -> str:
    """One line per pool: mean and std over seeds of each missing level and the case average."""
    keys = []
    for r in rows:
        for k in r.values():
            if (k == "avg" or k.startswith("missing")) and k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pool", "status"] + [f"{k}_{stat}" for k in keys for stat in ("mean", "std")])
    for r in rows:
        vals = r.values()
        cells = []
        for k in keys:
            mean, std = vals.get(k, (float("nan"), float("nan")))
            cells += [repr(mean), repr(std)]
        w.writerow([r.pool, "ok" if r.artifacts.ok else "failed"] + cells)
    return buf.getvalue()
