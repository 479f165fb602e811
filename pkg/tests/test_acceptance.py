"""Acceptance suite: one test per criterion, at the stated sizes and
tolerances, printing one pass/fail line each.  The heavy criteria use two
worker processes; every run is seeded through the scenario master seed, so
the whole suite is deterministic."""

import contextlib
import math
import os
import time

import numpy as np
import pytest

from hwqueue import (ArrivalLaw, Lemma2Config, PolicyKind, RecordOptions,
                     SdeParams, build_rate_profile, dominance_audit, euler_maruyama,
                     fifo_audit, invariant_audit, ks_distance, lemma2_bounds,
                     lemma2_mc, simulate)
from hwqueue.analysis import dominance_campaign, lemma1_campaign, policy_comparison
from hwqueue.diffusion import marginal_samples, sde_batch_for_scenario
from hwqueue.replicate import run_one
from hwqueue.scenario import load_scenario
from hwqueue.seeds import stream
from hwqueue.simcore import PathRecord

SCENARIO = os.path.join(os.path.dirname(__file__), "..", "scenarios", "twopool.yaml")
CFG = load_scenario(SCENARIO)
WORKERS = 2


@contextlib.contextmanager
def criterion(num, label):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[criterion {num}] FAIL: {label} ({time.perf_counter() - t0:.1f}s)")
        raise
    print(f"[criterion {num}] PASS: {label} ({time.perf_counter() - t0:.1f}s)")


def test_criterion_1_erlang_c_waiting_probability():
    with criterion(1, "M/M/2 waiting probability 1/3 +- 0.01 over >= 1e5 arrivals"):
        t0 = time.perf_counter()
        profile = build_rate_profile(
            load_scenario(os.path.join(os.path.dirname(SCENARIO),
                                       "homogeneous.yaml")).pool_spec, 2)
        path = simulate(profile, ArrivalLaw.exponential(), 1.0,
                        PolicyKind.LOWEST_INDEX, horizon=105_000.0,
                        rng=np.random.default_rng(20260810),
                        record=RecordOptions(mode="grid", grid_step=105_000.0))
        arrivals = path.summary["arrivals"]
        assert arrivals >= 100_000
        p_wait = path.summary["n_waited"] / arrivals
        assert abs(p_wait - 1.0 / 3.0) <= 0.01, p_wait
        assert time.perf_counter() - t0 < 10.0


def test_criterion_2_sde_solver_against_exact_flow():
    with criterion(2, "solver reproduces the exact restoring flow at dt=1e-4"):
        t0 = time.perf_counter()
        path = euler_maruyama(SdeParams(xi0=-1.0, sigma=0.0, beta_drift=0.0,
                                        mu_star=1.0), dt=1e-4, T=1.0,
                              rng=np.random.default_rng(0))
        assert abs(path.values[-1] + math.exp(-1.0)) <= 1e-3
        assert time.perf_counter() - t0 < 1.0


def test_criterion_3_marginal_convergence_trend():
    with criterion(3, "KS trend over the ladder; KS(1600) <= 0.10"):
        t0 = time.perf_counter()
        lim = CFG.limit_params()
        assert lim.sigma2 == pytest.approx(3.6, abs=1e-12)
        assert lim.beta_drift == pytest.approx(-1.0, abs=1e-12)
        assert lim.mu_star == 1.0
        sde_vals, params = sde_batch_for_scenario(CFG, CFG.t_probe)
        assert len(sde_vals) == 20_000
        ks = {}
        for n in CFG.ladder:
            sims = marginal_samples(CFG, n, PolicyKind.PI0, CFG.t_probe,
                                    CFG.reps, workers=WORKERS)
            assert len(sims) == 2000
            ks[n] = ks_distance(sims, sde_vals)
        seq = [ks[n] for n in CFG.ladder]
        print(f"    KS by n: {dict(zip(CFG.ladder, [round(v, 4) for v in seq]))}")
        inversions = [seq[i + 1] - seq[i] for i in range(len(seq) - 1)
                      if seq[i + 1] > seq[i]]
        assert len(inversions) <= 1, seq
        assert all(exc <= 0.01 for exc in inversions), seq
        assert seq[-1] <= 0.10, seq
        assert time.perf_counter() - t0 < 30 * 60


def test_criterion_4_fast_class_idle_metric_shrinks():
    with criterion(4, "median fast-idle metric at n=1600 <= half of n=100"):
        t0 = time.perf_counter()
        eps, alpha = CFG.partition["epsilon"], CFG.partition["alpha"]
        assert alpha == 1.5
        reps = 200
        med = {}
        for n in (100, 1600):
            vals = lemma1_campaign(CFG, n, reps, (eps, alpha), CFG.horizon,
                                   workers=WORKERS)
            med[n] = float(np.median(vals))
            assert math.isfinite(med[n]) and med[n] >= 0.0
        print(f"    medians: n=100 -> {med[100]:.4f}, n=1600 -> {med[1600]:.4f}")
        assert med[1600] <= 0.5 * med[100], med
        assert time.perf_counter() - t0 < 15 * 60


def test_criterion_5_ordering_concentration_and_bounds():
    with criterion(5, "ordering-error events <= 0.05; bounds dominate and fall"):
        t0 = time.perf_counter()
        cfg = Lemma2Config.from_mapping(CFG.lemma2)
        assert (cfg.phi, cfg.psi, cfg.beta_exp) == (1.0, 2.0, 0.75)
        assert (cfg.kappa, cfg.gamma, cfg.c1, cfg.c2) == (0.05, 0.18, 1.0, 1.0)
        mc = lemma2_mc(cfg, 10_000, 200, stream(CFG.master_seed, 10_000, 0, "lemma2"))
        print(f"    p1_hat={mc.p1_hat:.3f}, p2_hat={mc.p2_hat:.3f}")
        assert mc.p1_hat <= 0.05 and mc.p2_hat <= 0.05
        bounds = [lemma2_bounds(cfg, n) for n in (10_000, 10**6, 10**8)]
        assert bounds[0].bound1 >= mc.p1_hat - 3 * mc.se(mc.p1_hat)
        assert bounds[0].bound2 >= mc.p2_hat - 3 * mc.se(mc.p2_hat)
        for a, b in zip(bounds, bounds[1:]):
            assert b.log_bound1 < a.log_bound1
            assert b.log_bound2 < a.log_bound2
        assert time.perf_counter() - t0 < 5 * 60


def test_criterion_6_dominance_all_policies_clean():
    with criterion(6, "zero dominance violations at n=400, 50 seeds, 4 policies"):
        t0 = time.perf_counter()
        for policy in (PolicyKind.PI0, PolicyKind.FSF, PolicyKind.RANDOM_IDLE,
                       PolicyKind.SLOWEST_FIRST):
            out = dominance_campaign(CFG, 400, policy, 50, workers=WORKERS)
            assert out["violations"] == 0, out
            assert out["conservation_breaches"] == 0, out
            assert out["v_n"] == 0.0, out
        assert time.perf_counter() - t0 < 10 * 60


def test_criterion_7_optimality_ordering():
    with criterion(7, "SlowestFirst above PI0 at 95%; PI0 and FSF within 2 s.e."):
        t0 = time.perf_counter()
        rows, _ = policy_comparison(
            CFG, 1600, [PolicyKind.PI0, PolicyKind.FSF, PolicyKind.SLOWEST_FIRST],
            CFG.t_probe, 500, workers=WORKERS)
        stats = {r.policy: r for r in rows}
        pi0, fsf, sf = stats["PI0"], stats["FSF"], stats["SlowestFirst"]
        print(f"    mean xhat(10): PI0={pi0.mean_xhat:+.4f} FSF={fsf.mean_xhat:+.4f} "
              f"SlowestFirst={sf.mean_xhat:+.4f}")
        z = (sf.mean_xhat - pi0.mean_xhat) / math.hypot(sf.se_xhat, pi0.se_xhat)
        assert z >= 1.645, z
        gap = abs(pi0.mean_xhat - fsf.mean_xhat)
        assert gap <= 2.0 * math.hypot(pi0.se_xhat, fsf.se_xhat), (gap, pi0, fsf)
        assert time.perf_counter() - t0 < 20 * 60


def _c8_case(args):
    n, policy_name, seed = args
    policy = PolicyKind(policy_name)
    rec = lambda: RecordOptions(mode="full", job_log=True)
    a = run_one(CFG, n, policy, seed, record=rec(), horizon=2.0)
    b = run_one(CFG, n, policy, seed, record=rec(), horizon=2.0)
    deterministic = (np.array_equal(a.t, b.t) and np.array_equal(a.X, b.X)
                     and np.array_equal(a.A, b.A)
                     and np.array_equal(a.idle_rate_integral, b.idle_rate_integral)
                     and np.array_equal(a.srv_routed, b.srv_routed))
    return (invariant_audit(a).ok, fifo_audit(a).ok, deterministic)


def test_criterion_8_structural_invariants_everywhere():
    with criterion(8, "invariants, FIFO, non-interruption, determinism on all runs"):
        t0 = time.perf_counter()
        from hwqueue.replicate import parallel_map
        cases = [(n, policy.value, seed)
                 for n in (10, 100, 1000)
                 for policy in PolicyKind
                 for seed in range(100)]
        results = parallel_map(_c8_case, cases, WORKERS)
        assert len(results) == 1500
        bad = [case for case, r in zip(cases, results) if not all(r)]
        assert bad == [], f"{len(bad)} failing runs, first: {bad[:3]}"
        assert time.perf_counter() - t0 < 10 * 60
