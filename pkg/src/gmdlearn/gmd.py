"""Gradient-guided modality decoupling.

Given shared-parameter gradients from several modal-incomplete cases, every
pair whose cosine similarity is strictly negative has the conflicting
components removed: each gradient loses its projection onto the *original*
counterpart. For one pair this equals re-weighting the two gradients by

    w_j = 1 - (g_j . g_k) / |g_j|^2,    w_k = 1 - (g_j . g_k) / |g_k|^2

and summing. With more than two cases all projections are taken against the
original gradients, so the result does not depend on processing order.
Gradients with norm below ``EPS`` conflict with nothing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import GradientVector
from .cases import ModalityCase

EPS = 1e-12


def _check_pair(g_j: GradientVector, g_k: GradientVector) -> None:
    if g_j.group_id != g_k.group_id:
        raise ValueError(f"gradients belong to different groups: {g_j.group_id!r} vs {g_k.group_id!r}")
    if len(g_j) != len(g_k):
        raise ValueError(f"gradient length mismatch: {len(g_j)} vs {len(g_k)}")


def _cos(dot: float, n_j: float, n_k: float) -> float:
    if n_j < EPS or n_k < EPS:
        return 0.0
    return min(1.0, max(-1.0, dot / (n_j * n_k)))


def cosine_similarity(g_j: GradientVector, g_k: GradientVector) -> float:
    _check_pair(g_j, g_k)
    return _cos(float(np.dot(g_j.values, g_k.values)), g_j.norm, g_k.norm)


def project(g_j: GradientVector, onto: GradientVector) -> GradientVector:
    """Component of ``g_j`` along ``onto``."""
    _check_pair(g_j, onto)
    sq = float(np.dot(onto.values, onto.values))
    if np.sqrt(sq) < EPS:
        raise ValueError("cannot project onto a zero-norm gradient")
    return onto.replace(float(np.dot(g_j.values, onto.values)) / sq * onto.values)


@dataclass(frozen=True)
class PairRecord:
    cosine: float
    conflicting: bool
    weights: tuple[float, float] | None = None


def gmd_weights(g_j: GradientVector, g_k: GradientVector) -> tuple[float, float]:
    _check_pair(g_j, g_k)
    dot = float(np.dot(g_j.values, g_k.values))
    sq_j = float(np.dot(g_j.values, g_j.values))
    sq_k = float(np.dot(g_k.values, g_k.values))
    if np.sqrt(sq_j) < EPS or np.sqrt(sq_k) < EPS or dot >= 0:
        raise ValueError("weights are only defined for a conflicting pair (negative cosine, non-zero norms)")
    return 1.0 - dot / sq_j, 1.0 - dot / sq_k


def gmd_pair(g_j: GradientVector, g_k: GradientVector):
    """Calibrate one pair. Returns ``(g_j_tilde, g_k_tilde, PairRecord)``."""
    _check_pair(g_j, g_k)
    cos = cosine_similarity(g_j, g_k)
    if cos >= 0:
        return g_j, g_k, PairRecord(cos, False)
    new_j = g_j.replace(g_j.values - project(g_j, g_k).values)
    new_k = g_k.replace(g_k.values - project(g_k, g_j).values)
    return new_j, new_k, PairRecord(cos, True, gmd_weights(g_j, g_k))


@dataclass(frozen=True)
class PairWeights:
    """Weights of one conflicting pair, ``weights[i]`` belongs to ``cases[i]``."""

    cases: tuple[str, str]
    weights: tuple[float, float]


@dataclass
class ConflictReport:
    """Pairwise conflict statistics of one step, in the order gradients were given."""

    case_ids: list[str]
    cos_matrix: np.ndarray
    norms: np.ndarray
    weights: list[PairWeights] = field(default_factory=list)
    post_cos_matrix: np.ndarray | None = None

    @property
    def n_conflicts(self) -> int:
        n = len(self.case_ids)
        iu = np.triu_indices(n, 1)
        return int((self.cos_matrix[iu] < 0).sum())

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(
            cases=list(self.case_ids),
            cos_matrix=self.cos_matrix.tolist(),
            norms=self.norms.tolist(),
            weights=[{"cases": list(w.cases), "w": list(w.weights)} for w in self.weights],
            n_conflicts=self.n_conflicts,
        )
        if self.post_cos_matrix is not None:
            rec["post_cos_matrix"] = self.post_cos_matrix.tolist()
        return rec

    def to_json(self, **extra) -> str:
        return json.dumps(self.to_record(**extra), separators=(",", ":"))

    @classmethod
    def from_record(cls, rec: dict) -> ConflictReport:
        post = rec.get("post_cos_matrix")
        return cls(
            case_ids=list(rec["cases"]),
            cos_matrix=np.asarray(rec["cos_matrix"], dtype=float),
            norms=np.asarray(rec["norms"], dtype=float),
            weights=[PairWeights(tuple(w["cases"]), tuple(w["w"])) for w in rec["weights"]],
            post_cos_matrix=None if post is None else np.asarray(post, dtype=float),
        )


def _cosine_matrix(vectors: np.ndarray, norms: np.ndarray) -> np.ndarray:
    n = len(vectors)
    out = np.zeros((n, n))
    for i in range(n):
        out[i, i] = 1.0 if norms[i] >= EPS else 0.0
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = _cos(float(np.dot(vectors[i], vectors[j])), norms[i], norms[j])
    return out


def _validate(entries) -> None:
    if len(entries) < 2:
        raise ValueError(f"GMD needs at least 2 gradients, got {len(entries)}")
    group, size = entries[0][1].group_id, len(entries[0][1])
    seen = set()
    for case, g in entries:
        if g.group_id != group:
            raise ValueError(f"mixed parameter groups: {group!r} and {g.group_id!r}")
        if len(g) != size:
            raise ValueError(f"gradient length mismatch: {size} vs {len(g)}")
        if case in seen:
            raise ValueError(f"duplicate case {case}")
        seen.add(case)


def conflict_report(entries: Sequence[tuple[ModalityCase, GradientVector]]) -> ConflictReport:
    """Cosines and norms of uncalibrated gradients (no weights, no post matrix)."""
    _validate(entries)
    vecs = np.stack([g.values for _, g in entries])
    norms = np.sqrt([float(np.dot(v, v)) for v in vecs])
    return ConflictReport([str(c) for c, _ in entries], _cosine_matrix(vecs, norms), norms)


def gmd_all(entries: Sequence[tuple[ModalityCase, GradientVector]]):
    """Calibrate every conflicting pair against the original gradients.

    Returns the calibrated gradients, in input order, and a
    :class:`ConflictReport` with pre- and post-calibration cosines. The
    arithmetic runs over cases sorted by mask, so permuting ``entries``
    permutes the output without changing a single bit.
    """
    _validate(entries)
    order = sorted(range(len(entries)), key=lambda i: entries[i][0].mask)
    cases = [entries[i][0] for i in order]
    vecs = [entries[i][1].values for i in order]
    n = len(vecs)
    sq = np.array([float(np.dot(v, v)) for v in vecs])
    norms = np.sqrt(sq)
    dots = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dots[i, j] = dots[j, i] = float(np.dot(vecs[i], vecs[j]))
    cos = np.eye(n) * (norms >= EPS)
    for i in range(n):
        for j in range(i + 1, n):
            cos[i, j] = cos[j, i] = _cos(dots[i, j], norms[i], norms[j])

    calibrated = []
    weights = []
    for i in range(n):
        out = vecs[i].copy()
        for j in range(n):
            if j != i and cos[i, j] < 0:
                out -= (dots[i, j] / sq[j]) * vecs[j]
        calibrated.append(out)
    for i in range(n):
        for j in range(i + 1, n):
            if cos[i, j] < 0:
                weights.append(
                    PairWeights(
                        (str(cases[i]), str(cases[j])),
                        (1.0 - dots[i, j] / sq[i], 1.0 - dots[i, j] / sq[j]),
                    )
                )

    post_norms = np.sqrt([float(np.dot(v, v)) for v in calibrated])
    post = _cosine_matrix(np.stack(calibrated), post_norms)

    inverse = np.argsort(order)
    group = entries[0][1].group_id
    report = ConflictReport(
        case_ids=[str(c) for c, _ in entries],
        cos_matrix=cos[np.ix_(inverse, inverse)],
        norms=norms[inverse],
        weights=weights,
        post_cos_matrix=post[np.ix_(inverse, inverse)],
    )
    return [GradientVector(group, calibrated[i]) for i in inverse], report


def reduce(gradients: Sequence[GradientVector]) -> GradientVector:
    """Elementwise sum, accumulated in the given order."""
    if not gradients:
        raise ValueError("nothing to reduce")
    total = gradients[0].values.copy()
    for g in gradients[1:]:
        _check_pair(gradients[0], g)
        total += g.values
    return gradients[0].replace(total)


def dominance_deviation(g_j: np.ndarray, g_k: np.ndarray) -> float:
    """Relative distance between the plain sum ``g_j + g_k`` and ``g_j`` alone."""
    g_j, g_k = np.asarray(g_j, float), np.asarray(g_k, float)
    return float(np.linalg.norm((g_j + g_k) - g_j) / np.linalg.norm(g_j))


def dominance_demo(norm_ratio: float, angle_deg: float = 135.0) -> float:
    """Deviation of the summed gradient from the dominant one, for 2-D gradients
    with norm ratio ``norm_ratio`` meeting at ``angle_deg``; equals ``1 / norm_ratio``.
    """
    if not norm_ratio > 1:
        raise ValueError(f"norm ratio must exceed 1, got {norm_ratio}")
    if not 90 < angle_deg <= 180:
        raise ValueError(f"conflicting gradients need an angle in (90, 180], got {angle_deg}")
    phi = np.deg2rad(angle_deg)
    g_j = np.array([float(norm_ratio), 0.0])
    g_k = np.array([np.cos(phi), np.sin(phi)])
    return dominance_deviation(g_j, g_k)
