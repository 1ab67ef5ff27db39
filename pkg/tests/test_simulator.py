from dataclasses import replace

import pytest

from evgate.errors import InvalidConfig
from evgate.simulator import (
    SimConfig,
    analytic_claim_error,
    exact_pattern_probs,
    pattern_check,
    power_overlay,
    simulate,
    stress_cost,
    validate_baselines,
)


def test_independent_matches_closed_form():
    cfg = SimConfig(n_draws=40_000, seed=1)
    res = simulate(cfg, m_eff_boot=20)
    assert analytic_claim_error(cfg) == pytest.approx(1 - 0.95**5)
    assert res.claim_error.within(analytic_claim_error(cfg))
    assert res.fp_rate.within(0.05)


def test_exact_enumeration_small_n():
    cfg = SimConfig(n_f=3, n_alt=1, n_draws=30_000, seed=2)
    probs = exact_pattern_probs(cfg)
    assert sum(probs.values()) == pytest.approx(1.0)
    assert probs["000"] == pytest.approx(0.95**2 * 0.9)
    assert all(r["within"] for r in pattern_check(simulate(cfg, m_eff_boot=10), cfg))


@pytest.mark.parametrize("model,extra", [("gaussian", {}), ("t", {"nu": 4}), ("beta_binomial", {"phi": 0.3})])
def test_dependence_keeps_marginals(model, extra):
    cfg = SimConfig(model=model, rho=0.5, n_draws=30_000, seed=3, **extra)
    res = simulate(cfg, m_eff_boot=20)
    assert res.fp_rate.within(0.05, k=4)
    # positive dependence lowers the chance of at least one false positive
    assert res.claim_error.value < analytic_claim_error(cfg)


def test_multiplicity_control_under_dependence():
    for model, rho in (("gaussian", 0.7), ("t", 0.3)):
        res = simulate(SimConfig(model=model, rho=rho, n_f=8, n_alt=3, n_draws=20_000, seed=4), m_eff_boot=20)
        assert res.fwer_post_holm.value <= 0.05 + 3 * res.fwer_post_holm.se
        assert res.fdr_post_by.value <= 0.05 + 3 * res.fdr_post_by.se


def test_cascade_rules_and_answers():
    base = SimConfig(n_f=4, n_alt=2, n_draws=20_000, seed=5)
    any_fp = simulate(base, m_eff_boot=10).claim_error.value
    any_err = simulate(replace(base, cascade_rule="any_error"), m_eff_boot=10).claim_error.value
    assert any_err > any_fp
    assert simulate(replace(base, cascade_rule="post_holm"), m_eff_boot=10).claim_error.value < any_fp
    two = simulate(replace(base, n_c=2), m_eff_boot=10)
    assert two.answer_error.value == pytest.approx(1 - (1 - two.claim_error.value) ** 2, abs=0.02)


def test_reproducible_bitwise():
    cfg = SimConfig(model="t", rho=0.3, n_draws=5000, seed=9)
    a, b = simulate(cfg, m_eff_boot=10), simulate(cfg, m_eff_boot=10)
    assert a.to_dict() == b.to_dict()
    assert simulate(replace(cfg, seed=10), m_eff_boot=10).to_dict() != a.to_dict()


def test_m_eff_limits():
    ind = simulate(SimConfig(n_f=10, n_draws=5000, seed=6), m_eff_boot=50).m_eff["m_eff"]
    same = simulate(SimConfig(n_f=10, model="gaussian", rho=1.0, n_draws=5000, seed=6), m_eff_boot=50).m_eff["m_eff"]
    assert abs(ind - 10) / 10 <= 0.05 and abs(same - 1) <= 0.02


def test_config_validation():
    for bad in ({"rho": 1.5}, {"model": "x"}, {"nu": 5, "model": "t"}, {"n_alt": 9}, {"phi": 1.0}, {"pair_fp": -0.1}):
        with pytest.raises(InvalidConfig):
            SimConfig(**bad)
    with pytest.raises(InvalidConfig):
        SimConfig.from_dict({"unknown": 1})
    assert SimConfig().config_hash == SimConfig.from_dict(SimConfig().to_dict()).config_hash


def test_baseline_report_never_raises():
    rep = validate_baselines(SimConfig(n_f=3, n_draws=5000, seed=7), rhos=(0.5, 0.0))
    names = [e["check"] for e in rep["entries"]]
    assert "rho0_matches_analytic" in names and "exact_enumeration" in names
    assert rep["passed"] is True


def test_power_overlay_small_grid():
    rows = power_overlay([0.30], reps=4000, seed=1)
    assert rows[0]["n_closed_form"] == 1015
    assert abs(rows[0]["rel_diff"]) <= 0.05
    clustered = power_overlay([0.30], reps=4000, seed=1, rho=0.3, cluster=5)
    assert clustered[0]["n_simulated"] > rows[0]["n_simulated"]


def test_stress_cost():
    model = {"retrieval": 3.0, "cheap": 1.0, "small": 2.0, "heavy": 10.0, "proofs": 2.0, "signing": 2.0}
    out = stress_cost(model, {"cache": "off", "heavy_share": 0.0}, n_requests=1000)
    assert out["p50_multiplier"] == pytest.approx(1.3)
    out = stress_cost(model, n_requests=20_000, seed=1)
    assert out["p90_multiplier"] > out["p50_multiplier"] >= 1.3
    assert out["components"]["heavy"]["contribution"] == pytest.approx(0.4, abs=0.02)
