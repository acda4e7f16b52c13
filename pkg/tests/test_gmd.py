import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmdlearn.autodiff import GradientVector
from gmdlearn.cases import ModalityCase, enumerate_cases
from gmdlearn.gmd import (
    ConflictReport,
    conflict_report,
    cosine_similarity,
    dominance_demo,
    dominance_deviation,
    gmd_all,
    gmd_pair,
    gmd_weights,
    project,
    reduce,
)


def gv(v, gid="shared"):
    return GradientVector(gid, np.asarray(v, dtype=float))


def oracle_calibrate(vs):
    """Plain-loop reference: subtract projections onto every conflicting original."""
    out = []
    for i, a in enumerate(vs):
        r = a.copy()
        for j, b in enumerate(vs):
            if i != j and a @ b < 0:
                r = r - (a @ b) / (b @ b) * b
        out.append(r)
    return out


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


# hand fixtures ----------------------------------------------------------------------


def test_hand_fixture_pair():
    g_j, g_k = gv([2.0, 0.0]), gv([-1.0, 1.0])
    assert cosine_similarity(g_j, g_k) == pytest.approx(-1 / np.sqrt(2))
    a, b, rec = gmd_pair(g_j, g_k)
    np.testing.assert_allclose(a.values, [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(b.values, [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(a.values + b.values, [1.0, 2.0], atol=1e-15)
    assert rec.conflicting and rec.weights == pytest.approx((1.5, 2.0))
    w_j, w_k = gmd_weights(g_j, g_k)
    np.testing.assert_allclose(w_j * g_j.values + w_k * g_k.values, [1.0, 2.0], atol=1e-15)


def test_non_conflicting_pair_untouched():
    g_j, g_k = gv([1.0, 0.0]), gv([0.0, 3.0])
    a, b, rec = gmd_pair(g_j, g_k)
    assert a is g_j and b is g_k and not rec.conflicting and rec.weights is None
    with pytest.raises(ValueError):
        gmd_weights(g_j, g_k)


def test_zero_gradient_conflicts_with_nothing():
    z, g = gv([0.0, 0.0]), gv([1.0, -1.0])
    assert cosine_similarity(z, g) == 0.0
    a, b, rec = gmd_pair(z, g)
    assert not rec.conflicting
    with pytest.raises(ValueError):
        project(g, z)


def test_group_and_length_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity(gv([1.0]), gv([1.0], "head"))
    with pytest.raises(ValueError):
        cosine_similarity(gv([1.0]), gv([1.0, 2.0]))


def test_dominance_example():
    # |g_j| = 100, |g_k| = 1 at 135 degrees: the sum moves 1% away from g_j.
    assert dominance_demo(100, 135) == pytest.approx(0.01, abs=1e-12)
    g_j = np.array([100.0, 0.0])
    g_k = np.array([np.cos(np.deg2rad(135)), np.sin(np.deg2rad(135))])
    assert dominance_deviation(g_j, g_k) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        dominance_demo(1.0)
    with pytest.raises(ValueError):
        dominance_demo(10, 45)


# pair properties --------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 20).flatmap(lambda n: st.tuples(vec(n), vec(n))))
@example((np.array([0.0, -1.0]), np.array([1.0, 2.22507386e-311])))
def test_pair_properties(pair):
    a, b = pair
    assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
    g_j, g_k = gv(a), gv(b)
    new_j, new_k, rec = gmd_pair(g_j, g_k)
    if a @ b >= 0:
        assert not rec.conflicting
        return
    scale = np.linalg.norm(a) * np.linalg.norm(b)
    # orthogonal to the original counterpart
    assert abs(new_j.values @ b) <= 1e-9 * scale
    assert abs(new_k.values @ a) <= 1e-9 * scale
    # projection removed, never added
    assert np.linalg.norm(new_j.values) <= np.linalg.norm(a) * (1 + 1e-12)
    # weight form equals projection form
    w_j, w_k = rec.weights
    # 1 - dot/|g|^2 exceeds 1 exactly; a vanishing dot can round it to 1.0
    assert w_j >= 1 and w_k >= 1
    np.testing.assert_allclose(
        new_j.values + new_k.values, w_j * a + w_k * b, atol=1e-12 * (np.linalg.norm(a) + np.linalg.norm(b))
    )
    # the post-calibration pair no longer conflicts
    assert new_j.values @ new_k.values >= -1e-9 * scale


# multi-case ------------------------------------------------------------------------


def _entries(vs, m=3):
    cases = enumerate_cases(m)[: len(vs)]
    return [(c, gv(v)) for c, v in zip(cases, vs)]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 7), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_gmd_all_matches_oracle(n, d, seed):
    vs = list(np.random.default_rng(seed).standard_normal((n, d)))
    out, report = gmd_all(_entries(vs))
    for got, want in zip(out, oracle_calibrate(vs)):
        np.testing.assert_allclose(got.values, want, rtol=1e-12, atol=1e-12)
    expected = sum(1 for i, j in itertools.combinations(range(n), 2) if vs[i] @ vs[j] < 0)
    assert report.n_conflicts == len(report.weights) == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_gmd_all_permutation_exact(n, seed, rnd):
    vs = list(np.random.default_rng(seed).standard_normal((n, 9)))
    entries = _entries(vs)
    perm = list(range(n))
    rnd.shuffle(perm)
    out_a, rep_a = gmd_all(entries)
    out_b, rep_b = gmd_all([entries[i] for i in perm])
    for pos, i in enumerate(perm):
        assert out_b[pos].values.tobytes() == out_a[i].values.tobytes()
    np.testing.assert_array_equal(rep_b.cos_matrix, rep_a.cos_matrix[np.ix_(perm, perm)])
    np.testing.assert_array_equal(rep_b.post_cos_matrix, rep_a.post_cos_matrix[np.ix_(perm, perm)])


def test_gmd_all_two_cases_equals_pair():
    a, b = np.array([2.0, 0.0, 1.0]), np.array([-1.0, 1.0, 0.5])
    out, report = gmd_all(_entries([a, b]))
    pj, pk, rec = gmd_pair(gv(a), gv(b))
    np.testing.assert_array_equal(out[0].values, pj.values)
    np.testing.assert_array_equal(out[1].values, pk.values)
    assert report.weights[0].weights == pytest.approx(rec.weights, rel=1e-15)
    assert report.post_cos_matrix[0, 1] >= -1e-12


def test_gmd_all_validation():
    c = ModalityCase.full(2)
    with pytest.raises(ValueError):
        gmd_all([(c, gv([1.0]))])
    with pytest.raises(ValueError):
        gmd_all([(c, gv([1.0])), (c, gv([-1.0]))])
    with pytest.raises(ValueError):
        gmd_all([(c, gv([1.0])), (ModalityCase(1, 2), gv([-1.0], "head"))])


def test_report_json_round_trip():
    vs = list(np.random.default_rng(0).standard_normal((4, 5)))
    _, report = gmd_all(_entries(vs))
    line = report.to_json(seed=3, step=7)
    rec = json.loads(line)
    assert rec["seed"] == 3 and rec["step"] == 7 and rec["n_conflicts"] == report.n_conflicts
    back = ConflictReport.from_record(rec)
    np.testing.assert_array_equal(back.cos_matrix, report.cos_matrix)
    np.testing.assert_array_equal(back.post_cos_matrix, report.post_cos_matrix)
    assert back.weights == report.weights
    assert " " not in line


def test_conflict_report_without_calibration():
    vs = [np.array([1.0, 0.0]), np.array([-1.0, 0.1])]
    report = conflict_report(_entries(vs))
    assert report.n_conflicts == 1 and report.post_cos_matrix is None and not report.weights
    np.testing.assert_allclose(report.norms, [1.0, np.hypot(1, 0.1)])


def test_reduce_sums_in_order():
    total = reduce([gv([1.0, 2.0]), gv([3.0, -1.0]), gv([0.5, 0.5])])
    np.testing.assert_array_equal(total.values, [4.5, 1.5])
    with pytest.raises(ValueError):
        reduce([])
