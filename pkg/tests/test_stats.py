import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fleiss_oracle, holm_oracle, step_up_oracle

from evgate.errors import InvalidEnrollment, InvalidRates
from evgate.stats import (
    SUPPORTS,
    PValueFamily,
    bh_fdr,
    bh_reject,
    bonferroni_reject,
    by_fdr,
    by_reject,
    conditional_power,
    harmonic,
    holm_fwer,
    holm_reject,
    jitter_tau,
    kish_m_eff,
    m_eff_estimate,
    sample_size_two_proportions,
    storey_q,
)


pvec = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=300, deadline=None)
@given(pvec, st.sampled_from([0.01, 0.05, 0.1]))
def test_holm_and_by_match_brute_force(p, level):
    P = np.array([p])
    assert set(np.flatnonzero(holm_reject(P, level)[0])) == holm_oracle(p, level)
    assert set(np.flatnonzero(by_reject(P, level)[0])) == step_up_oracle(p, level, harmonic(len(p)))
    assert set(np.flatnonzero(bh_reject(P, level)[0])) == step_up_oracle(p, level)


def test_containments_on_random_matrix():
    rng = np.random.default_rng(3)
    P = rng.random((5000, 8)) ** 3
    assert not (bonferroni_reject(P, 0.05) & ~holm_reject(P, 0.05)).any()
    assert not (by_reject(P, 0.05) & ~bh_reject(P, 0.05)).any()


def test_holm_example_and_ids():
    res = holm_fwer(PValueFamily(SUPPORTS, (0.01, 0.04, 0.03), ("a", "b", "c")), 0.05)
    # 0.01 <= 0.05/3, 0.03 > 0.05/2 stops the walk
    assert res.rejected == frozenset({"a"})
    assert res.adjusted == pytest.approx((0.03, 0.06, 0.06))


def test_by_adjusted_matches_statsmodels_definition():
    p = [0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205]
    res = by_fdr(p, 0.05)
    c = sum(1 / i for i in range(1, 9))
    m = len(p)
    expect = [min(1.0, min(p[j] * m * c / (j + 1) for j in range(i, m))) for i in range(m)]
    assert list(res.adjusted) == pytest.approx(expect)
    assert bh_fdr(p, 0.05).rejected >= res.rejected


def test_storey_is_exploratory_and_bounded():
    res = storey_q([0.001, 0.2, 0.5, 0.9, 0.04], lam=0.5, level=0.05)
    assert res.exploratory
    assert 0 < res.pi0 <= 1


def test_kish_limits():
    assert kish_m_eff(10, 0.0) == pytest.approx(10)
    assert kish_m_eff(10, 1.0) == pytest.approx(1)
    assert kish_m_eff(10, 0.3) == pytest.approx(10 / 3.7)


def test_m_eff_from_correlation_matrix():
    C = np.full((10, 10), 0.3)
    np.fill_diagonal(C, 1.0)
    rep = m_eff_estimate(corr=C)
    assert rep.m_eff == pytest.approx(10 / 3.7, rel=1e-9)


def test_m_eff_bootstrap_independent_columns():
    rng = np.random.default_rng(0)
    rep = m_eff_estimate(outcomes=rng.standard_normal((20000, 8)), n_boot=100, seed=1)
    assert rep.m_eff == pytest.approx(8, rel=0.02)
    assert rep.ci[0] <= rep.m_eff <= rep.ci[1]


@pytest.mark.parametrize("p0", [0.05, 0.10, 0.15, 0.30])
def test_sample_size_matches_fleiss_oracle(p0):
    plan = sample_size_two_proportions(p0, 0.2, 0.05, 0.85)
    assert plan.n_per_arm == fleiss_oracle(p0, 0.2, 0.05, 0.85)
    assert plan.n_with_margin == math.ceil(plan.n_per_arm * 1.1 - 1e-9)


def test_sample_size_rejects_bad_rates():
    with pytest.raises(InvalidRates):
        sample_size_two_proportions(0.0, 0.2)
    with pytest.raises(InvalidRates):
        sample_size_two_proportions(0.15, 1.5)


def test_conditional_power_behaviour():
    full = conditional_power(2395, 2395, 0.20)
    assert full.cp >= 0.85 and not full.low
    weak = conditional_power(600, 2395, 0.0)
    assert weak.low
    assert conditional_power(0, 2395, 0.0).cp > weak.cp
    with pytest.raises(InvalidEnrollment):
        conditional_power(3000, 2395, 0.20)


def test_jitter_is_deterministic_and_bounded():
    vals = [jitter_tau(0.8, f"s{i}", 0.02) for i in range(500)]
    assert all(0.78 <= v <= 0.82 for v in vals)
    assert jitter_tau(0.8, "s1", 0.02) == vals[1]
    assert len(set(vals)) > 400
