"""Modal-incomplete cases: which modality subsets are presented to the model.

A case is a non-empty bit set over ``M`` modalities; bit ``i`` stands for
modality ``i`` (0-based). Its string form lists modality 1 first, so with
``M = 4`` the case holding modalities 1 and 3 prints as ``"1010"``.

Pool policies name the cases eligible for sampling:

- ``all``: every non-empty subset (``2**M - 1`` cases)
- ``full``: only the complete case
- ``missingD``: subsets with exactly ``D`` modalities absent
- comma-joined unions of the above, e.g. ``"missing1,full"``
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from functools import total_ordering

import numpy as np

MAX_MODALITIES = 16
SAMPLER_STREAM = 0x5A3E


@total_ordering
@dataclass(frozen=True)
class ModalityCase:
    mask: int
    n_modalities: int

    def __post_init__(self):
        if not 1 <= self.n_modalities <= MAX_MODALITIES:
            raise ValueError(f"modality count must be in [1, {MAX_MODALITIES}], got {self.n_modalities}")
        if not 0 < self.mask < (1 << self.n_modalities):
            raise ValueError(f"mask {self.mask} is not a non-empty subset of {self.n_modalities} modalities")

    @classmethod
    def from_members(cls, members, n_modalities: int) -> ModalityCase:
        mask = 0
        for m in members:
            if not 0 <= m < n_modalities:
                raise ValueError(f"modality index {m} out of range for {n_modalities} modalities")
            mask |= 1 << m
        return cls(mask, n_modalities)

    @classmethod
    def full(cls, n_modalities: int) -> ModalityCase:
        return cls((1 << n_modalities) - 1, n_modalities)

    @classmethod
    def parse(cls, text: str) -> ModalityCase:
        """Inverse of ``str(case)``."""
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"not a case mask string: {text!r}")
        return cls.from_members([i for i, ch in enumerate(text) if ch == "1"], len(text))

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_modalities) if self.mask >> i & 1)

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")

    @property
    def n_missing(self) -> int:
        return self.n_modalities - self.size

    @property
    def is_full(self) -> bool:
        return self.size == self.n_modalities

    def __contains__(self, modality: int) -> bool:
        return 0 <= modality < self.n_modalities and bool(self.mask >> modality & 1)

    def __lt__(self, other: ModalityCase) -> bool:
        return (self.n_modalities, self.members) < (other.n_modalities, other.members)

    def __str__(self) -> str:
        return "".join("1" if self.mask >> i & 1 else "0" for i in range(self.n_modalities))


_MISSING = re.compile(r"missing(\d+)$")


def parse_pool(pool) -> tuple[str, ...]:
    """Normalise a pool policy to a tuple of tokens."""
    if isinstance(pool, str):
        tokens = [t.strip() for t in pool.split(",")]
    else:
        tokens = [str(t).strip() for t in pool]
    if not tokens or any(not t for t in tokens):
        raise ValueError(f"empty pool policy: {pool!r}")
    for t in tokens:
        if t not in ("all", "full") and not _MISSING.match(t):
            raise ValueError(f"unknown pool policy {t!r}; expected all, full, missingD or a comma-joined union")
    return tuple(tokens)


def missing_exactly(d: int) -> str:
    return f"missing{d}"


def _token_cases(token: str, n_modalities: int) -> list[ModalityCase]:
    if token == "all":
        return [ModalityCase(m, n_modalities) for m in range(1, 1 << n_modalities)]
    if token == "full":
        return [ModalityCase.full(n_modalities)]
    d = int(_MISSING.match(token).group(1))
    if d >= n_modalities:
        raise ValueError(f"pool {token!r} is empty for {n_modalities} modalities")
    size = n_modalities - d
    return [ModalityCase(m, n_modalities) for m in range(1, 1 << n_modalities) if bin(m).count("1") == size]


def enumerate_cases(n_modalities: int, pool="all") -> list[ModalityCase]:
    """Cases of a pool, duplicate-free and sorted by member tuple."""
    if not 1 <= n_modalities <= MAX_MODALITIES:
        raise ValueError(f"modality count must be in [1, {MAX_MODALITIES}], got {n_modalities}")
    cases: set[ModalityCase] = set()
    for token in parse_pool(pool):
        cases.update(_token_cases(token, n_modalities))
    return sorted(cases)


@dataclass(frozen=True)
class SamplerConfig:
    """How many cases to draw per iteration and from which pool.

    With ``include_full`` the complete case is always drawn (it counts
    towards ``k``) and the effective pool is ``pool`` plus the complete case.
    """

    k: int = 5
    pool: str = "all"
    include_full: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pool", ",".join(parse_pool(self.pool)))
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    def with_seed(self, seed: int) -> SamplerConfig:
        return replace(self, seed=seed)


class CaseSampler:
    """Seeded draws of ``k`` distinct cases; draw ``i`` depends only on (seed, i)."""

    def __init__(self, cfg: SamplerConfig, n_modalities: int):
        pool = enumerate_cases(n_modalities, cfg.pool)
        full = ModalityCase.full(n_modalities)
        if cfg.include_full:
            self._fixed = [full]
            self._rest = [c for c in pool if c != full]
        else:
            self._fixed = []
            self._rest = pool
        self.pool = sorted(self._fixed + self._rest)
        if cfg.k > len(self.pool):
            raise ValueError(f"k={cfg.k} exceeds the pool size {len(self.pool)} of policy {cfg.pool!r}")
        self.cfg = cfg
        self.n_modalities = n_modalities

    def draw(self, index: int) -> list[ModalityCase]:
        rng = np.random.default_rng([self.cfg.seed, SAMPLER_STREAM, index])
        n = self.cfg.k - len(self._fixed)
        picked = rng.choice(len(self._rest), size=n, replace=False) if n else []
        return self._fixed + [self._rest[i] for i in picked]


def sample_cases(cfg: SamplerConfig, n_modalities: int, index: int = 0) -> list[ModalityCase]:
    return CaseSampler(cfg, n_modalities).draw(index)


def pool_size(n_modalities: int, missing: int | None = None) -> int:
    """Closed-form pool size: ``2**M - 1`` for ``all``, ``C(M, M - d)`` otherwise."""
    if missing is None:
        return (1 << n_modalities) - 1
    return math.comb(n_modalities, n_modalities - missing)
