"""Multimodal datasets: a synthetic generator with tunable modality dominance and
a loader for delimited text tables.

In a generated dataset every modality sees a class-conditional pattern plus
gaussian noise. Patterns mix a part shared by all modalities (one class code
mapped into each modality's feature space) with a modality-specific part; the
mix is set by ``redundancy``. ``signal_strength`` scales each modality's
pattern, so a strong modality paired with weak ones yields dominance.
``feature_scale`` multiplies a whole modality (pattern and noise) afterwards;
it leaves the information content alone but changes gradient magnitudes, which
is how one modality comes to dominate shared updates.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DATA_STREAM = 0xDA7A
SPLIT_STREAM = 0x5B17
SPLIT_NAMES = ("train", "val", "test")
# Per-coordinate magnitude of a unit-strength class pattern.
PATTERN_SCALE = 1.0


@dataclass(frozen=True)
class DominanceSpec:
    signal_strength: tuple[float, ...]
    noise_std: tuple[float, ...] | float = 1.0
    redundancy: float = 0.5
    feature_scale: tuple[float, ...] | float = 1.0

    def __post_init__(self):
        s = tuple(float(v) for v in self.signal_strength)
        per_modality = lambda v: tuple(float(x) for x in v) if isinstance(v, Sequence) else (float(v),) * len(s)  # noqa: E731
        n = per_modality(self.noise_std)
        f = per_modality(self.feature_scale)
        object.__setattr__(self, "signal_strength", s)
        object.__setattr__(self, "noise_std", n)
        object.__setattr__(self, "feature_scale", f)
        if not s:
            raise ValueError("signal_strength needs one entry per modality")
        if len(n) != len(s):
            raise ValueError(f"noise_std has {len(n)} entries for {len(s)} modalities")
        if len(f) != len(s):
            raise ValueError(f"feature_scale has {len(f)} entries for {len(s)} modalities")
        if any(not (v > 0 and np.isfinite(v)) for v in f):
            raise ValueError(f"feature_scale must be positive and finite, got {f}")
        if any(not 0.0 <= v <= 1.0 for v in s):
            raise ValueError(f"signal strengths must lie in [0, 1], got {s}")
        if not any(v > 0 for v in s):
            raise ValueError("at least one modality needs a positive signal strength")
        if any(not v >= 0 for v in n):
            raise ValueError(f"noise_std must be >= 0, got {n}")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ValueError(f"redundancy must lie in [0, 1], got {self.redundancy}")

    @property
    def n_modalities(self) -> int:
        return len(self.signal_strength)


@dataclass
class MultimodalDataset:
    modalities: list[np.ndarray]
    target: np.ndarray
    splits: dict[str, np.ndarray]
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.target)
        for i, x in enumerate(self.modalities):
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"modality {i + 1} has shape {x.shape}, expected ({n}, d)")
            if not np.isfinite(x).all():
                raise ValueError(f"modality {i + 1} contains non-finite values")
        seen: set[int] = set()
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"split {name!r} indexes outside [0, {n})")
            overlap = seen.intersection(idx.tolist())
            if overlap or len(set(idx.tolist())) != idx.size:
                raise ValueError(f"split {name!r} overlaps another split or repeats rows")
            seen.update(idx.tolist())
            self.splits[name] = idx

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.modalities)

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, split: str | np.ndarray):
        """``(inputs, target)`` for a split name or an explicit index array."""
        idx = self.splits[split] if isinstance(split, str) else np.asarray(split)
        return [x[idx] for x in self.modalities], self.target[idx]


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def split_indices(n: int, fractions: Sequence[float], seed: int) -> dict[str, np.ndarray]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def generate(
    spec: DominanceSpec,
    n_samples: int,
    n_classes: int,
    dims: int | Sequence[int],
    seed: int,
    splits: Sequence[float] = (0.6, 0.2, 0.2),
) -> MultimodalDataset:
    """Draw a classification dataset; identical arguments give identical arrays."""
    m = spec.n_modalities
    dims = (int(dims),) * m if np.isscalar(dims) else tuple(int(d) for d in dims)
    if len(dims) != m or any(d < 1 for d in dims):
        raise ValueError(f"dims must give a positive width for each of {m} modalities, got {dims}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_samples < 1:
        raise ValueError("need at least 1 sample")
    rng = np.random.default_rng([seed, DATA_STREAM])
    shared_code = rng.standard_normal((n_classes, n_classes))
    y = rng.integers(0, n_classes, size=n_samples)
    r = spec.redundancy
    modalities = []
    for i, d in enumerate(dims):
        mix = rng.standard_normal((n_classes, d))
        shared = _unit_rows(shared_code @ mix)
        specific = _unit_rows(rng.standard_normal((n_classes, d)))
        mixed = np.sqrt(r) * shared + np.sqrt(1.0 - r) * specific
        # In very low dimensions the two parts can cancel exactly.
        degenerate = np.linalg.norm(mixed, axis=1) < 1e-12
        mixed[degenerate] = specific[degenerate]
        pattern = _unit_rows(mixed)
        pattern *= PATTERN_SCALE * np.sqrt(d) * spec.signal_strength[i]
        noise = rng.standard_normal((n_samples, d)) * spec.noise_std[i]
        modalities.append((pattern[y] + noise) * spec.feature_scale[i])
    meta = {
        "generator": "dominance",
        "signal_strength": list(spec.signal_strength),
        "noise_std": list(spec.noise_std),
        "feature_scale": list(spec.feature_scale),
        "redundancy": spec.redundancy,
        "n_samples": n_samples,
        "n_classes": n_classes,
        "dims": list(dims),
        "seed": seed,
    }
    return MultimodalDataset(modalities, y, split_indices(n_samples, splits, seed), n_classes, meta)


# delimited text ----------------------------------------------------------------

_COLS = re.compile(r"^\s*cols?\s+(\d+)\s*(?:\.\.\s*(\d+))?\s*$")


def parse_columns(text: str) -> tuple[int, int]:
    """``"cols 0..3"`` -> ``(0, 3)`` (inclusive); ``"col 7"`` -> ``(7, 7)``."""
    match = _COLS.match(str(text))
    if not match:
        raise ValueError(f"cannot parse column range {text!r}; expected 'cols a..b' or 'col c'")
    a = int(match.group(1))
    b = int(match.group(2)) if match.group(2) is not None else a
    if b < a:
        raise ValueError(f"empty column range {text!r}")
    return a, b


@dataclass(frozen=True)
class TabularSchema:
    """Column layout of a delimited table.

    ``splits`` is either three fractions or a mapping from split name to a
    file of row indices (one integer per line, relative paths resolved
    against the table's directory).
    """

    modality_cols: tuple[tuple[int, int], ...]
    target_col: int
    delimiter: str = ","
    splits: tuple[float, ...] | Mapping[str, str] = (0.6, 0.2, 0.2)
    task: str = "classification"
    split_seed: int = 0

    def __post_init__(self):
        if not self.modality_cols:
            raise ValueError("schema needs at least one modality")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        used: set[int] = set()
        for i, (a, b) in enumerate(self.modality_cols):
            cols = set(range(a, b + 1))
            if cols & used:
                raise ValueError(f"modality {i + 1} columns overlap another modality")
            used |= cols
        if self.target_col in used:
            raise ValueError("target column overlaps a modality")

    @property
    def n_columns(self) -> int:
        return max([b for _, b in self.modality_cols] + [self.target_col]) + 1


def load_tabular(path, schema: TabularSchema) -> MultimodalDataset:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        width = len(header)
        if schema.n_columns > width:
            raise ValueError(
                f"{path}: schema refers to column {schema.n_columns - 1} but the header has {width} columns"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}: line {line_no}: expected {width} fields, got {len(row)}")
            values = []
            for col, field_ in enumerate(row):
                if field_.strip() == "":
                    raise ValueError(f"{path}: line {line_no}, column {col}: missing value")
                try:
                    values.append(float(field_))
                except ValueError:
                    raise ValueError(f"{path}: line {line_no}, column {col}: not a number: {field_!r}") from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    if not np.isfinite(table).all():
        bad = int(np.argwhere(~np.isfinite(table))[0, 0])
        raise ValueError(f"{path}: line {bad + 2}: non-finite value")
    modalities = [table[:, a : b + 1].copy() for a, b in schema.modality_cols]
    target = table[:, schema.target_col]
    n_classes = None
    if schema.task == "classification":
        if not np.all(target == np.round(target)) or target.min() < 0:
            raise ValueError(f"{path}: classification targets must be non-negative integers")
        target = target.astype(np.int64)
        n_classes = int(target.max()) + 1
    if isinstance(schema.splits, Mapping):
        splits = {}
        for name in SPLIT_NAMES:
            if name not in schema.splits:
                raise ValueError(f"split files must name train, val and test; missing {name!r}")
            split_path = Path(schema.splits[name])
            if not split_path.is_absolute():
                split_path = path.parent / split_path
            splits[name] = np.loadtxt(split_path, dtype=np.int64, ndmin=1)
    else:
        splits = split_indices(len(target), schema.splits, schema.split_seed)
    meta = {"source": str(path)}
    return MultimodalDataset(modalities, target, splits, n_classes, meta)


def write_tabular(dataset: MultimodalDataset, directory, name: str = "dataset") -> TabularSchema:
    """Write ``<name>.csv`` plus one index file per split; return the matching schema."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols, header, start = [], [], 0
    for i, x in enumerate(dataset.modalities):
        d = x.shape[1]
        cols.append((start, start + d - 1))
        header += [f"m{i + 1}_{j}" for j in range(d)]
        start += d
    header.append("target")
    table = np.concatenate(dataset.modalities, axis=1)
    with (directory / f"{name}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, t in zip(table, dataset.target):
            cells = [repr(float(v)) for v in row]
            cells.append(str(int(t)) if dataset.is_classification else repr(float(t)))
            writer.writerow(cells)
    files = {}
    for split, idx in dataset.splits.items():
        fname = f"{name}.{split}.idx"
        (directory / fname).write_text("".join(f"{int(i)}\n" for i in idx))
        files[split] = fname
    return TabularSchema(
        modality_cols=tuple(cols),
        target_col=start,
        splits=files,
        task="classification" if dataset.is_classification else "regression",
    )
