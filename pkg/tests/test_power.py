import itertools
from collections import Counter
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from pushbroom.denoiser import ConfigError
from pushbroom.power import (PowerPolicy, active_set_for_budget, active_trace, cardinality_pmf,
                             parse_budget, parse_schedule, sample_subset)


def decimal_pmf(lam, d):
    """P(N) = e^{lam N} / sum_j e^{lam j} at 60 significant digits."""
    getcontext().prec = 60
    w = [(Decimal(lam) * n).exp() for n in range(1, d + 1)]
    total = sum(w)
    return [x / total for x in w]


@pytest.mark.parametrize("lam", [-50, -1, 0, 1, 50])
@pytest.mark.parametrize("d", [1, 3, 5, 7])
def test_pmf_matches_high_precision_oracle(lam, d):
    got = cardinality_pmf(lam, d)
    want = decimal_pmf(lam, d)
    assert max(abs(Decimal(float(g)) - w) for g, w in zip(got, want)) < Decimal("1e-12")


def test_pmf_examples():
    np.testing.assert_array_equal(cardinality_pmf(0, 5), np.full(5, 0.2))
    np.testing.assert_allclose(cardinality_pmf(1, 3), [0.0900, 0.2447, 0.6652], atol=5e-5)
    # P(5) > 1 - 1e-20: check the complement, which is representable
    assert cardinality_pmf(50, 5)[:4].sum() < 1e-20
    assert cardinality_pmf(-50, 5)[1:].sum() < 1e-20
    assert np.isfinite(cardinality_pmf(100, 9)).all() and np.isfinite(cardinality_pmf(-100, 9)).all()


@settings(max_examples=60, deadline=None)
@given(st.floats(-100, 100, allow_nan=False), st.integers(1, 12))
def test_pmf_is_normalised_positive_and_monotone(lam, d):
    p = cardinality_pmf(lam, d)
    assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()
    diffs = np.diff(p)
    # strict monotonicity where the ratio e^lam is distinguishable from 1
    if lam > 1e-6 and p.min() > 1e-300:
        assert (diffs > 0).all()
    if lam < -1e-6 and p.min() > 1e-300:
        assert (diffs < 0).all()


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30, allow_nan=False), st.integers(1, 8))
def test_log_space_equals_naive_form(lam, d):
    w = np.exp(lam * np.arange(1, d + 1))
    np.testing.assert_allclose(cardinality_pmf(lam, d), w / w.sum(), rtol=0, atol=1e-12)


def test_pmf_rejects_empty_mixture():
    with pytest.raises(ValueError):
        cardinality_pmf(0.0, 0)
    with pytest.raises(ConfigError):
        PowerPolicy(0.0, 0)


def test_singleton_mixture_always_samples_its_member():
    rng = np.random.default_rng(0)
    pol = PowerPolicy(-3.0, 1)
    assert {sample_subset(pol, rng) for _ in range(100)} == {(0,)}


def chi2_pvalue(counts, expected):
    counts, expected = np.asarray(counts, float), np.asarray(expected, float)
    stat = ((counts - expected) ** 2 / expected).sum()
    return chi2.sf(stat, len(counts) - 1)


def test_sampler_cardinality_and_identity_pass_chi_square():
    rng = np.random.default_rng(1)
    pol = PowerPolicy(0.0, 3)
    draws = [sample_subset(pol, rng) for _ in range(30_000)]
    sizes = Counter(len(s) for s in draws)
    assert chi2_pvalue([sizes[n] for n in (1, 2, 3)], [10_000] * 3) > 0.01
    pairs = Counter(s for s in draws if len(s) == 2)
    assert set(pairs) == set(itertools.combinations(range(3), 2))
    total = sum(pairs.values())
    assert chi2_pvalue(list(pairs.values()), [total / 3] * 3) > 0.01


def test_sampler_follows_a_skewed_pmf():
    rng = np.random.default_rng(2)
    pol = PowerPolicy(1.0, 4)
    sizes = Counter(len(sample_subset(pol, rng)) for _ in range(30_000))
    assert chi2_pvalue([sizes[n] for n in range(1, 5)], 30_000 * pol.pmf()) > 0.01


def test_subsets_are_sorted_and_distinct():
    rng = np.random.default_rng(3)
    pol = PowerPolicy(0.5, 6)
    for _ in range(200):
        s = sample_subset(pol, rng)
        assert list(s) == sorted(set(s)) and all(0 <= i < 6 for i in s)


def test_budget_levels_map_to_prefixes():
    pol = PowerPolicy(0.0, 5, parse_budget("low=1, mid=3 ,high=5,over=9,off=0"))
    assert active_set_for_budget(pol, "low") == (0,)
    assert active_set_for_budget(pol, "mid") == (0, 1, 2)
    assert active_set_for_budget(pol, "high") == tuple(range(5))
    assert active_set_for_budget(pol, "over") == tuple(range(5))
    with pytest.raises(ConfigError):
        active_set_for_budget(pol, "off")
    with pytest.raises(ConfigError):
        active_set_for_budget(pol, "turbo")
    with pytest.raises(ConfigError):
        parse_budget("low:1")


ORBIT = """
# synthetic orbit: eclipse in the middle
0-99     high
100-149  low   # eclipse
150-199  mid
"""


def test_schedule_replay_matches_exactly():
    pol = PowerPolicy(0.0, 4, {"low": 1, "mid": 2, "high": 4})
    trace = active_trace(pol, parse_schedule(ORBIT), 200)
    want = [(0, 1, 2, 3)] * 100 + [(0,)] * 50 + [(0, 1)] * 50
    assert trace == want
    assert trace == active_trace(pol, parse_schedule(ORBIT), 200)


def test_schedule_errors():
    pol = PowerPolicy(0.0, 2, {"a": 1})
    with pytest.raises(ConfigError, match="overlap"):
        parse_schedule("0-10 a\n10-20 a")
    with pytest.raises(ConfigError, match="reversed"):
        parse_schedule("5-1 a")
    with pytest.raises(ConfigError, match="line 1"):
        parse_schedule("zero-ten a")
    with pytest.raises(ConfigError, match="cover"):
        active_trace(pol, parse_schedule("0-4 a"), 8)
