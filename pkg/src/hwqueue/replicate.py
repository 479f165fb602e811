"""Replication plumbing: per-replication stream derivation and worker pools.

Each replication is a pure function of (scenario, n, policy, rep): the rate
profile is rebuilt deterministically, the sampling plan and the event stream
get independent generators derived from the master seed, and results are
merged by replication index so output never depends on worker scheduling.
"""

from __future__ import annotations

import math
import os
from multiprocessing import Pool

from .sampling import SamplePlan
from .scenario import ScenarioConfig, arrival_rate_for_n, build_rate_profile
from .seeds import stream
from .simcore import PathRecord, PolicyKind, RecordOptions, simulate


def default_workers() -> int:
    env = os.environ.get("HWQUEUE_WORKERS", "").strip()
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def parallel_map(fn, argslist, workers: int):
    argslist = list(argslist)
    if workers <= 1 or len(argslist) <= 1:
        return [fn(a) for a in argslist]
    chunk = max(1, len(argslist) // (4 * workers))
    with Pool(processes=workers) as pool:
        return pool.map(fn, argslist, chunksize=chunk)


def run_one(cfg: ScenarioConfig, n: int, policy: PolicyKind, rep: int, *,
            record: RecordOptions | None = None,
            horizon: float | None = None,
            assert_invariants: bool = False) -> PathRecord:
    """One replication: fresh sampling plan, fresh event stream, fixed seeds."""
    profile = build_rate_profile(cfg.pool_spec, n)
    nr = profile.n_realized
    lambda_n = arrival_rate_for_n(cfg.pool_spec.mu, cfg.lambda_hat, nr)
    plan = None
    if policy is PolicyKind.PI0:
        plan = SamplePlan.draw(profile, cfg.beta_r, stream(cfg.master_seed, n, rep, "plan"))
    x0 = nr + round(math.sqrt(nr) * cfg.xi0)
    rng = stream(cfg.master_seed, n, rep, "sim:" + policy.value)
    return simulate(
        profile, cfg.arrival, lambda_n, policy,
        horizon=horizon if horizon is not None else cfg.horizon,
        rng=rng, plan=plan, x0=x0, record=record,
        assert_invariants=assert_invariants,
    )
