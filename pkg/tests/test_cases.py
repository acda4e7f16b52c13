import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmdlearn.cases import (
    CaseSampler,
    ModalityCase,
    SamplerConfig,
    enumerate_cases,
    parse_pool,
    pool_size,
    sample_cases,
)


def test_string_form_lists_modality_one_first():
    case = ModalityCase.from_members([0, 2], 4)
    assert str(case) == "1010"
    assert ModalityCase.parse("1010") == case
    assert case.members == (0, 2)
    assert case.size == 2 and case.n_missing == 2
    assert 2 in case and 1 not in case
    assert ModalityCase.full(3).is_full


@pytest.mark.parametrize("bad", [(0, 3), (8, 3), (1, 0), (1, 17)])
def test_invalid_cases(bad):
    with pytest.raises(ValueError):
        ModalityCase(*bad)


@pytest.mark.parametrize("text", ["", "000", "10a"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        ModalityCase.parse(text)


@pytest.mark.parametrize("m", range(1, 9))
def test_enumeration_counts(m):
    cases = enumerate_cases(m, "all")
    assert len(cases) == pool_size(m) == 2**m - 1
    assert len(set(cases)) == len(cases)
    for d in range(m):
        got = enumerate_cases(m, f"missing{d}")
        assert len(got) == pool_size(m, d) == math.comb(m, m - d)
        assert all(c.n_missing == d for c in got)


def test_union_pool_is_deduplicated():
    assert enumerate_cases(3, "missing0,full") == [ModalityCase.full(3)]
    assert len(enumerate_cases(4, "missing1,missing2")) == 4 + 6
    assert enumerate_cases(3, "all,missing1") == enumerate_cases(3, "all")


@pytest.mark.parametrize("pool", ["", "some", "all,", "missing", "missingx"])
def test_bad_pools(pool):
    with pytest.raises(ValueError):
        parse_pool(pool)


def test_empty_missing_pool():
    with pytest.raises(ValueError):
        enumerate_cases(3, "missing3")


@given(st.integers(2, 8), st.integers(0, 10_000), st.integers(0, 10**6))
def test_draws_are_distinct_and_include_full(m, seed, index):
    k = min(5, 2**m - 1)
    draw = sample_cases(SamplerConfig(k, "all", True, seed), m, index)
    assert len(draw) == k and len(set(draw)) == k
    assert draw[0] == ModalityCase.full(m)


def test_draws_depend_only_on_seed_and_index():
    s = CaseSampler(SamplerConfig(3, "all", False, 11), 5)
    first = [s.draw(i) for i in range(20)]
    again = CaseSampler(SamplerConfig(3, "all", False, 11), 5)
    assert [again.draw(i) for i in reversed(range(20))] == first[::-1]
    other = CaseSampler(SamplerConfig(3, "all", False, 12), 5)
    assert [other.draw(i) for i in range(20)] != first


def test_include_full_widens_pool():
    s = CaseSampler(SamplerConfig(2, "missing1", True), 3)
    assert ModalityCase.full(3) in s.pool and len(s.pool) == 4
    with pytest.raises(ValueError):
        CaseSampler(SamplerConfig(5, "missing1", True), 3)
    with pytest.raises(ValueError):
        SamplerConfig(0)


def test_uniform_single_draws():
    # k=1 without the fixed full case: each of the 15 cases has p = 1/15.
    m, n = 4, 10_000
    s = CaseSampler(SamplerConfig(1, "all", False, 3), m)
    counts = Counter(str(s.draw(i)[0]) for i in range(n))
    p = 1 / 15
    sigma = math.sqrt(n * p * (1 - p))
    assert len(counts) == 15
    for c in counts.values():
        assert abs(c - n * p) <= 3 * sigma + 1


def test_ordering_is_by_members():
    cases = enumerate_cases(3)
    assert [c.members for c in cases] == sorted(c.members for c in cases)
    assert sorted(reversed(cases)) == cases
