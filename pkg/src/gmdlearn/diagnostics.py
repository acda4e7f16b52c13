"""Post-hoc analysis of training records (the JSON lines in ``conflicts.jsonl``).

Everything here is a pure function of the records, so the tables can be
rebuilt from run artifacts alone and re-running gives identical bytes.
Outputs are CSV tables; plotting is left to external tools.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cases import ModalityCase

N_BINS = 18
BIN_WIDTH = 10.0
DEFAULT_WINDOW = 100
PHASES = ("pre", "post")
# Angles are rounded before binning so that cosines a few ulps either side of
# 0 or +-0.5 land in the bin of their exact value.
ANGLE_DECIMALS = 9

_REQUIRED = ("seed", "step", "cases", "cos_matrix", "norms", "weights")


def _check_record(rec, where: str) -> dict:
    if not isinstance(rec, dict):
        raise ValueError(f"{where}: expected a JSON object")
    for key in _REQUIRED:
        if key not in rec:
            raise ValueError(f"{where}: missing key {key!r}")
    n = len(rec["cases"])
    cos = np.asarray(rec["cos_matrix"], dtype=float)
    if cos.shape != (n, n) or len(rec["norms"]) != n:
        raise ValueError(f"{where}: cos_matrix/norms do not match {n} cases")
    post = rec.get("post_cos_matrix")
    if post is not None and np.asarray(post, dtype=float).shape != (n, n):
        raise ValueError(f"{where}: post_cos_matrix does not match {n} cases")
    for c in rec["cases"]:
        ModalityCase.parse(c)
    return rec


def parse_records(lines: Iterable[str], source: str = "<records>") -> list[dict]:
    out = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{source}: line {line_no}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{where}: invalid JSON ({exc.msg})") from None
        try:
            out.append(_check_record(rec, where))
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            raise ValueError(msg if msg.startswith(where) else f"{where}: {msg}") from None
    return out


def load_records(path) -> list[dict]:
    """Records from a ``conflicts.jsonl`` file or a directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / "conflicts.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no records at {path}")
    with path.open() as fh:
        records = parse_records(fh, str(path))
    if not records:
        raise ValueError(f"{path}: no records")
    return records


# gradient norms -------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    per_case: dict[str, tuple[float, float, int]]  # case -> (mean, std, count)
    cross_case_std: float
    n_records: int


def norm_stats(records: Sequence[dict]) -> NormStats:
    """Per-case norm mean/std (population) and the spread across cases.

    ``cross_case_std`` is the population std of the norms within one step,
    averaged over steps; steps with a single case contribute 0.
    """
    if not records:
        raise ValueError("norm_stats needs at least one record")
    by_case: dict[str, list[float]] = {}
    spreads = []
    for rec in records:
        norms = np.asarray(rec["norms"], dtype=float)
        for case, value in zip(rec["cases"], norms):
            by_case.setdefault(case, []).append(float(value))
        spreads.append(float(np.std(norms)))
    per_case = {
        c: (float(np.mean(v)), float(np.std(v)), len(v))
        for c, v in sorted(by_case.items(), key=lambda kv: ModalityCase.parse(kv[0]))
    }
    return NormStats(per_case, float(np.mean(spreads)), len(records))


# angles ---------------------------------------------------------------------------


def pairwise_angles(cos_matrix, mask=None) -> np.ndarray:
    """Angles in degrees of the upper-triangle pairs, optionally filtered by a
    boolean matrix ``mask`` of the same shape."""
    cos = np.asarray(cos_matrix, dtype=float)
    iu = np.triu_indices(len(cos), 1)
    values = cos[iu]
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)[iu]]
    return np.degrees(np.arccos(np.clip(values, -1.0, 1.0)))


def angle_bins(angles) -> np.ndarray:
    """Counts over 18 bins of 10 degrees; 180 falls into the last bin."""
    angles = np.round(np.asarray(angles, dtype=float), ANGLE_DECIMALS)
    idx = np.minimum((angles // BIN_WIDTH).astype(int), N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS)


def angle_histogram(records: Sequence[dict], phase: str = "pre", conflicting_only: bool = False) -> np.ndarray:
    """Histogram of pairwise gradient angles before or after calibration.

    With ``conflicting_only`` only the pairs that conflicted before calibration
    (the processed pairs) are counted.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    counts = np.zeros(N_BINS, dtype=np.int64)
    for rec in records:
        pre = np.asarray(rec["cos_matrix"], dtype=float)
        if phase == "post":
            if rec.get("post_cos_matrix") is None:
                raise ValueError(f"record for step {rec['step']} has no post-calibration cosines")
            cos = np.asarray(rec["post_cos_matrix"], dtype=float)
        else:
            cos = pre
        mask = pre < 0 if conflicting_only else None
        counts += angle_bins(pairwise_angles(cos, mask))
    return counts


def bin_edges() -> list[tuple[float, float]]:
    return [(i * BIN_WIDTH, (i + 1) * BIN_WIDTH) for i in range(N_BINS)]


# smoothing and weight traces ------------------------------------------------------


def smooth(series, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Centered moving average, edges padded by replicating the end values.

    An even window uses the centered 2-by-``window`` average (half weight on
    the two outermost points), so a linear ramp passes through unchanged away
    from the edges for every window size.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError("smooth expects a 1-D series")
    window = int(window)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > len(x):
        raise ValueError(f"window {window} exceeds series length {len(x)}")
    if window == 1:
        return x.copy()
    half = window // 2
    if window % 2:
        kernel = np.full(window, 1.0 / window)
    else:
        kernel = np.full(window + 1, 1.0 / window)
        kernel[0] = kernel[-1] = 0.5 / window
    padded = np.concatenate([np.full(half, x[0]), x, np.full(half, x[-1])])
    return np.convolve(padded, kernel, mode="valid")


@dataclass(frozen=True)
class WeightTrace:
    """Weights of one case pair over the steps where both cases were drawn.

    ``values[:, 0]`` belongs to ``pair[0]``. Steps where the pair did not
    conflict carry weight 1 (calibration left both gradients unchanged).
    """

    seed: int
    pair: tuple[str, str]
    steps: np.ndarray
    values: np.ndarray
    smoothed: np.ndarray
    window: int


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if ModalityCase.parse(a) <= ModalityCase.parse(b) else (b, a)


def weight_traces(records: Sequence[dict], window: int = DEFAULT_WINDOW) -> list[WeightTrace]:
    """One trace per (seed, case pair). Traces shorter than ``window`` are
    smoothed over their full length instead."""
    raw: dict[tuple[int, tuple[str, str]], list[tuple[int, float, float]]] = {}
    for rec in sorted(records, key=lambda r: (r["seed"], r["step"])):
        conflicted = {}
        for w in rec["weights"]:
            a, b = w["cases"]
            key = _pair_key(a, b)
            wa, wb = (float(x) for x in w["w"])
            conflicted[key] = (wa, wb) if key == (a, b) else (wb, wa)
        cases = rec["cases"]
        for i in range(len(cases)):
            for j in range(i + 1, len(cases)):
                key = _pair_key(cases[i], cases[j])
                wa, wb = conflicted.get(key, (1.0, 1.0))
                raw.setdefault((rec["seed"], key), []).append((rec["step"], wa, wb))
    traces = []
    for (seed, pair), rows in sorted(raw.items(), key=lambda kv: (kv[0][0], [ModalityCase.parse(c) for c in kv[0][1]])):
        steps = np.array([r[0] for r in rows], dtype=np.int64)
        values = np.array([[r[1], r[2]] for r in rows], dtype=float)
        w = min(window, len(rows))
        smoothed = np.column_stack([smooth(values[:, 0], w), smooth(values[:, 1], w)])
        traces.append(WeightTrace(seed, pair, steps, values, smoothed, w))
    return traces


# CSV output ----------------------------------------------------------------------


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def norm_stats_csv(stats: NormStats) -> str:
    rows = [[c, repr(m), repr(s), n] for c, (m, s, n) in stats.per_case.items()]
    rows.append(["cross_case", repr(stats.cross_case_std), "", stats.n_records])
    return _csv(["case_mask", "norm_mean", "norm_std", "count"], rows)


def angle_histogram_csv(records: Sequence[dict]) -> str:
    pre = angle_histogram(records, "pre")
    post = angle_histogram(records, "post")
    pre_c = angle_histogram(records, "pre", conflicting_only=True)
    post_c = angle_histogram(records, "post", conflicting_only=True)
    rows = [
        [f"{lo:g}", f"{hi:g}", int(a), int(b), int(c), int(d)]
        for (lo, hi), a, b, c, d in zip(bin_edges(), pre, post, pre_c, post_c)
    ]
    return _csv(["angle_lo", "angle_hi", "pre", "post", "pre_conflicting", "post_conflicting"], rows)


def weight_traces_csv(traces: Sequence[WeightTrace]) -> str:
    rows = []
    for t in traces:
        for step, (wa, wb), (sa, sb) in zip(t.steps, t.values, t.smoothed):
            rows.append([t.seed, t.pair[0], t.pair[1], int(step)] + [repr(float(v)) for v in (wa, wb, sa, sb)] + [t.window])
    return _csv(["seed", "case_a", "case_b", "step", "w_a", "w_b", "w_a_smooth", "w_b_smooth", "window"], rows)


DIAG_FILES = ("norm_stats.csv", "angle_histogram.csv", "weight_traces.csv")


def write_diagnostics(records: Sequence[dict], out_dir, window: int = DEFAULT_WINDOW) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = (
        norm_stats_csv(norm_stats(records)),
        angle_histogram_csv(records),
        weight_traces_csv(weight_traces(records, window)),
    )
    paths = []
    for name, text in zip(DIAG_FILES, tables):
        (out / name).write_text(text)
        paths.append(out / name)
    return paths
