import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hwqueue import (ArrivalLaw, ConfigurationError, Pool, PoolSpec,
                     arrival_rate_for_n, build_iid_profile, build_rate_profile,
                     compute_limit_params)
from hwqueue.scenario import (ScenarioConfig, load_scenario, scenario_from_mapping,
                              scenario_to_mapping, validate_scenario)

TWO_POOL = PoolSpec((Pool(a=0.2, b=1.0), Pool(a=0.8, b=2.0)))


def test_single_homogeneous_pool():
    profile = build_rate_profile(PoolSpec((Pool(a=1.0, b=1.0),)), 100)
    assert profile.n_realized == 100
    assert np.all(profile.rates == 1.0)
    assert profile.mu_star == 1.0
    assert profile.second_order_sum == 0.0


def test_two_pool_sizes_and_mean():
    profile = build_rate_profile(TWO_POOL, 1000)
    assert profile.pool_sizes == (200, 800)
    # mean by direct summation: (200*1 + 800*2)/1000
    assert profile.mu_bar_emp == pytest.approx(1.8, abs=1e-12)
    assert profile.mu_star == 1.0


def test_flexible_pool_sizes_and_rates_at_1e6():
    # two pools of size 0.2n + n^{3/4} and 0.8n + n^{4/5}, rates
    # 1 + 4n^{-1/6} + n^{-1/2} and 2 - n^{-1/6}
    spec = PoolSpec((
        Pool(a=0.2, b=1.0, c=1.0, f_exp=0.75, f_coef=1.0, g_exp=1 / 6, g_coef=4.0),
        Pool(a=0.8, b=2.0, c=0.0, f_exp=0.80, f_coef=1.0, g_exp=1 / 6, g_coef=-1.0),
    ))
    n = 10**6
    profile = build_rate_profile(spec, n)
    assert profile.pool_sizes == (231622, 863095)
    assert profile.rates[0] == pytest.approx(1.401, abs=1e-9)
    assert profile.rates[-1] == pytest.approx(1.9, abs=1e-9)


def test_rate_band_violation_names_pool_and_n():
    spec = PoolSpec((Pool(a=1.0, b=1.0, c=-50.0),))
    with pytest.raises(ConfigurationError, match=r"pool 0 .*n=25"):
        build_rate_profile(spec, 25)


def test_tiny_pool_errors():
    spec = PoolSpec((Pool(a=0.001, b=1.0), Pool(a=0.999, b=2.0)))
    with pytest.raises(ConfigurationError, match="pool 0"):
        build_rate_profile(spec, 100)


def test_pool_fraction_sum_enforced():
    with pytest.raises(ConfigurationError, match="fractions"):
        PoolSpec((Pool(a=0.2, b=1.0), Pool(a=0.7, b=2.0)))


def test_floor_snap_against_float_noise():
    # 0.58 * 100 = 57.999999999999993 in binary; exact arithmetic gives 58
    spec = PoolSpec((Pool(a=0.58, b=1.0), Pool(a=0.42, b=2.0)))
    profile = build_rate_profile(spec, 100)
    assert profile.pool_sizes == (58, 42)


def test_iid_point_mass():
    rng = np.random.default_rng(1)
    profile = build_iid_profile([(1.0, 1.0)], 50, rng)
    assert profile.n_realized == 50
    assert np.all(profile.rates == 1.0)
    assert profile.mu_star == 1.0


def test_iid_two_point_concentration():
    # binomial oracle: fraction of rate-1 draws within 3*sqrt(p(1-p)/n) of 1/2
    rng = np.random.default_rng(7)
    profile = build_iid_profile([(1.0, 0.5), (2.0, 0.5)], 10_000, rng)
    frac = np.mean(profile.rates == 1.0)
    assert 0.485 <= frac <= 0.515
    assert profile.mu_star == 1.0


def test_iid_deterministic_under_seed():
    a = build_iid_profile([(1.0, 0.5), (2.0, 0.5)], 4, np.random.default_rng(42))
    b = build_iid_profile([(1.0, 0.5), (2.0, 0.5)], 4, np.random.default_rng(42))
    assert np.array_equal(a.rates, b.rates)


def test_iid_empty_support_rejected():
    with pytest.raises(ConfigurationError, match="support"):
        build_iid_profile([(1.0, 0.0)], 10, np.random.default_rng(0))


def test_limit_params_homogeneous():
    spec = PoolSpec((Pool(a=1.0, b=1.0),))
    lim = compute_limit_params(spec, ArrivalLaw.exponential(), lambda_hat=-1.0,
                               n_ref=10_000)
    assert lim.sigma2 == pytest.approx(2.0, abs=1e-12)
    assert lim.beta_drift == pytest.approx(-1.0, abs=1e-12)
    assert lim.mu_star == 1.0
    assert lim.mu_hat == 0.0


def test_limit_params_second_order_sum_telescopes():
    spec = PoolSpec((Pool(a=0.2, b=1.0, c=5.0), Pool(a=0.8, b=2.0, c=0.0)))
    s4 = build_rate_profile(spec, 10**4).second_order_sum
    s6 = build_rate_profile(spec, 10**6).second_order_sum
    assert abs(s4 - s6) < 0.05
    lim = compute_limit_params(spec, ArrivalLaw.exponential(), lambda_hat=0.0,
                               n_ref=10**6)
    assert lim.mu_hat == pytest.approx(1.0, abs=0.01)   # sum a_i c_i
    assert lim.beta_drift == pytest.approx(-1.0, abs=0.01)


def test_limit_params_deterministic_arrivals():
    lim = compute_limit_params(TWO_POOL, ArrivalLaw.deterministic(), 0.0, 1000)
    assert lim.sigma2 == pytest.approx(1.8, abs=1e-12)


def test_arrival_rate_values():
    assert arrival_rate_for_n(1.8, -1.0, 400) == pytest.approx(700.0, abs=1e-9)
    assert arrival_rate_for_n(1.0, 0.0, 123) == pytest.approx(123.0)
    assert arrival_rate_for_n(1.0, 2.0, 10**4) == pytest.approx(10_200.0)
    with pytest.raises(ConfigurationError):
        arrival_rate_for_n(0.01, -10.0, 4)


@given(n=st.integers(min_value=1, max_value=10**7),
       lam=st.floats(0.1, 10.0), lam_hat=st.floats(-3.0, 3.0))
@settings(max_examples=200, deadline=None)
def test_arrival_rate_second_order_identity(n, lam, lam_hat):
    # the exact-equality convention keeps n^{-1/2}(lambda_n - n*lambda) pinned
    # at lambda_hat (up to float rounding of the recovery)
    try:
        lam_n = arrival_rate_for_n(lam, lam_hat, n)
    except ConfigurationError:
        return
    recovered = (lam_n - n * lam) / math.sqrt(n)
    assert recovered == pytest.approx(lam_hat, abs=1e-9, rel=1e-9)


def test_mean_rate_matches_first_order_formula():
    spec = PoolSpec((Pool(a=0.35, b=1.0, c=0.7), Pool(a=0.65, b=2.0, c=-0.3)))
    for n in (200, 1000, 5000, 20_001):
        profile = build_rate_profile(spec, n)
        target = sum(p.a * (p.b + p.c / math.sqrt(n)) for p in spec.pools)
        assert abs(profile.mu_bar_emp - target) <= 2 * spec.mu_hi / n


def test_second_order_sum_stabilizes():
    # fractions chosen so the floor remainder is nonzero at n=10^3 and zero at
    # the larger rungs; the constant measured at 10^3 must then hold
    spec = PoolSpec((Pool(a=0.3125, b=1.0, c=3.0), Pool(a=0.6875, b=2.0, c=-1.0)))
    target = sum(p.a * p.c for p in spec.pools)
    c_meas = abs(build_rate_profile(spec, 10**3).second_order_sum - target) * math.sqrt(10**3)
    assert c_meas > 0
    for n in (10**4, 10**5):
        dev = abs(build_rate_profile(spec, n).second_order_sum - target)
        assert dev <= c_meas / math.sqrt(n) + 1e-12


def test_no_servers_below_mu_star_in_standard_scenarios():
    spec = PoolSpec((
        Pool(a=0.2, b=1.0, c=1.0, f_exp=0.75, f_coef=1.0, g_exp=1 / 6, g_coef=4.0),
        Pool(a=0.8, b=2.0, c=0.0, f_exp=0.80, f_coef=1.0, g_exp=1 / 6, g_coef=-1.0),
    ))
    for n in (100, 1000, 10**5):
        profile = build_rate_profile(spec, n)
        for eps in (0.0, 1e-9, 0.01, 0.3):
            assert profile.slow_server_deficit(eps) == 0.0


# ---------------------------------------------------------------------------
# arrival laws


@pytest.mark.parametrize("law,scv", [
    (ArrivalLaw.exponential(), 1.0),
    (ArrivalLaw.deterministic(), 0.0),
    (ArrivalLaw.erlang(4), 0.25),
    (ArrivalLaw.hyperexp2(0.3), 1 / (2 * 0.3 * 0.7) - 1),
    (ArrivalLaw.uniform(1.0), 1.0 / 12.0),
])
def test_arrival_law_moments(law, scv):
    assert law.scv == pytest.approx(scv, abs=1e-12)
    rng = np.random.default_rng(2024)
    x = law.sample(rng, 10**6)
    assert np.all(x > 0)
    n = len(x)
    se_mean = x.std(ddof=1) / math.sqrt(n)
    assert abs(x.mean() - 1.0) <= 3 * se_mean + 1e-12
    var = x.var(ddof=1)
    m4 = np.mean((x - x.mean()) ** 4)
    se_var = math.sqrt(max(m4 - var**2, 0.0) / n)
    assert abs(var - scv) <= 3 * se_var + 1e-9


def test_hyperexp2_explicit_rates_must_have_unit_mean():
    with pytest.raises(ConfigurationError, match="mean"):
        ArrivalLaw.hyperexp2(0.3, 2.0, 1.0)
    law = ArrivalLaw.hyperexp2(0.5, 1.0, 1.0)   # degenerate but mean-1
    assert law.scv == pytest.approx(1.0)


def test_erlang_order_validated():
    with pytest.raises(ConfigurationError):
        ArrivalLaw.erlang(0)
    with pytest.raises(ConfigurationError):
        ArrivalLaw.uniform(2.0)


# ---------------------------------------------------------------------------
# scenario files


SCENARIO_YAML = """
name: twopool-test
arrival: {family: exponential}
lambda_hat: -1.0
pools:
  - {a: 0.2, b: 1.0}
  - {a: 0.8, b: 2.0}
ladder: [100, 400]
horizon: 5.0
t_probe: 5.0
reps: 10
master_seed: 99
partition: {epsilon: 0.6, alpha: 1.5}
"""


def test_load_scenario_roundtrip(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(SCENARIO_YAML)
    cfg = load_scenario(path)
    assert cfg.name == "twopool-test"
    assert cfg.ladder == (100, 400)
    assert cfg.arrival.family == "exponential"
    assert validate_scenario(cfg) == []
    cfg2 = scenario_from_mapping(scenario_to_mapping(cfg))
    assert cfg2 == cfg


def test_validate_collects_all_errors():
    doc = {
        "pools": [{"a": 0.2, "b": 1.0}, {"a": 0.7, "b": 2.0}],
        "beta_r": 0.4,
        "ladder": [50],
        "master_seed": 1,
    }
    with pytest.raises(ConfigurationError):
        scenario_from_mapping(doc)  # fraction sum enforced at construction

    cfg = scenario_from_mapping({
        "pools": [{"a": 0.2, "b": 1.0}, {"a": 0.8, "b": 2.0}],
        "beta_r": 0.4,
        "lambda_hat": -200.0,
        "ladder": [25],
        "master_seed": 1,
    })
    errs = validate_scenario(cfg)
    assert any("beta_r" in e and "(1/2, 1]" in e for e in errs)
    assert any("not positive" in e for e in errs)
    assert len(errs) >= 2
