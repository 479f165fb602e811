"""Limit-dynamics solver and diffusion-scale views of simulated paths.

The limiting scaled head count solves
    xi(t) = xi0 + sigma*w(t) + beta*t + mu_star * int_0^t xi(s)^- ds,
a Brownian motion with constant drift beta above zero and an extra restoring
drift mu_star*|xi| below.  An explicit Euler-Maruyama step is enough here:
the drift is one-sided Lipschitz and every downstream comparison is
distributional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AuditFailure, ConfigurationError
from .replicate import parallel_map, run_one
from .scenario import ScenarioConfig
from .seeds import stream
from .simcore import PathRecord, PolicyKind, RecordOptions


@dataclass(frozen=True)
class SdeParams:
    """Coefficients of the limit dynamics; xi0 may be a constant or a
    callable(rng, size) drawing initial values."""

    xi0: float | object = 0.0
    sigma: float = 1.0
    beta_drift: float = 0.0
    mu_star: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma={self.sigma} must be >= 0")
        if self.mu_star < 0:
            raise ConfigurationError(f"mu_star={self.mu_star} must be >= 0")

    def initial(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if callable(self.xi0):
            return np.asarray(self.xi0(rng, size), dtype=float)
        return np.full(size, float(self.xi0))


@dataclass(frozen=True)
class SdePath:
    dt: float
    values: np.ndarray   # on the grid 0, dt, ..., steps*dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.dt


def _n_steps(dt: float, T: float) -> int:
    if not 0 < dt <= T:
        if T == 0:
            return 0
        raise ConfigurationError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    return int(math.floor(T / dt + 1e-9))


def euler_maruyama(params: SdeParams, dt: float, T: float,
                   rng: np.random.Generator) -> SdePath:
    """One path; xi_{m+1} = xi_m + (beta + mu_star*xi_m^-) dt + sigma*sqrt(dt)*Z."""
    steps = _n_steps(dt, T)
    out = np.empty(steps + 1)
    x = float(params.initial(rng, 1)[0])
    out[0] = x
    beta = params.beta_drift
    mu_star = params.mu_star
    sq = params.sigma * math.sqrt(dt)
    if params.sigma == 0.0:
        for m in range(steps):
            x = x + (beta + mu_star * max(-x, 0.0)) * dt
            out[m + 1] = x
        return SdePath(dt=dt, values=out)
    z = rng.standard_normal(steps)
    for m in range(steps):
        x = x + (beta + mu_star * max(-x, 0.0)) * dt + sq * z[m]
        out[m + 1] = x
    return SdePath(dt=dt, values=out)


def sde_marginal_batch(params: SdeParams, dt: float, T: float, n_paths: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Terminal values xi(T) for n_paths independent paths (vectorized)."""
    steps = _n_steps(dt, T) if T > 0 else 0
    x = params.initial(rng, n_paths)
    beta = params.beta_drift
    mu_star = params.mu_star
    sq = params.sigma * math.sqrt(dt) if steps else 0.0
    for _ in range(steps):
        drift = beta + mu_star * np.maximum(-x, 0.0)
        x = x + drift * dt
        if sq:
            x += sq * rng.standard_normal(n_paths)
    return x


@dataclass(frozen=True)
class ScaledPath:
    """Diffusion-scale view of a recorded path: xhat = (X - n)/sqrt(n)."""

    times: np.ndarray
    xhat: np.ndarray
    qhat: np.ndarray
    ihat: np.ndarray
    n: int


def scale_path(path: PathRecord, n: int | None = None) -> ScaledPath:
    """Scale a recorded path, cross-checking the recorded buffer/idle columns
    against the work-conservation identities; a mismatch is an audit failure."""
    n = n if n is not None else path.n
    sq = math.sqrt(n)
    x = path.X
    derived_q = np.maximum(x - n, 0)
    derived_i = np.maximum(n - x, 0)
    bad = np.nonzero((derived_q != path.Q) | (derived_i != path.I))[0]
    if len(bad):
        j = int(bad[0])
        raise AuditFailure(
            f"work-conservation breach at t={path.t[j]!r}: recorded (Q={path.Q[j]}, "
            f"I={path.I[j]}) but X={x[j]} implies (Q={derived_q[j]}, I={derived_i[j]})")
    xhat = (x - n) / sq
    return ScaledPath(times=path.t, xhat=xhat, qhat=derived_q / sq,
                      ihat=derived_i / sq, n=n)


def unscale(xhat: np.ndarray, n: int) -> np.ndarray:
    return np.rint(np.asarray(xhat) * math.sqrt(n) + n).astype(np.int64)


def _marginal_worker(args) -> float:
    cfg, n, policy_name, rep, t_probe = args
    policy = PolicyKind(policy_name)
    step = t_probe if t_probe > 0 else cfg.horizon
    rec = RecordOptions(mode="grid", grid_step=step)
    path = run_one(cfg, n, policy, rep, record=rec)
    nr = path.n
    return (path.x_at(t_probe) - nr) / math.sqrt(nr)


def marginal_samples(cfg: ScenarioConfig, n: int, policy: PolicyKind, t_probe: float,
                     reps: int, workers: int = 1) -> np.ndarray:
    """reps independent draws of the scaled head count at t_probe, one per
    replication; the sampling plan is redrawn every replication."""
    if t_probe > cfg.horizon:
        raise ConfigurationError(f"t_probe={t_probe} beyond horizon={cfg.horizon}")
    args = [(cfg, n, policy.value, rep, t_probe) for rep in range(reps)]
    return np.array(parallel_map(_marginal_worker, args, workers))


def sde_batch_for_scenario(cfg: ScenarioConfig, t_probe: float,
                           n_samples: int | None = None,
                           dt: float | None = None) -> tuple[np.ndarray, SdeParams]:
    """Matched-coefficient terminal samples for a scenario's limit dynamics."""
    lim = cfg.limit_params()
    params = SdeParams(xi0=cfg.xi0, sigma=lim.sigma, beta_drift=lim.beta_drift,
                       mu_star=lim.mu_star)
    rng = stream(cfg.master_seed, 0, 0, "sde")
    vals = sde_marginal_batch(params, dt or cfg.sde_dt, t_probe,
                              n_samples or cfg.sde_samples, rng)
    return vals, params


def export_sde_samples(path, samples: np.ndarray, params: SdeParams, dt: float,
                       T: float, seed_tag: str) -> None:
    """Single-column CSV with comment-line metadata."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# xi0={params.xi0!r} sigma={params.sigma!r} "
                 f"beta={params.beta_drift!r} mu_star={params.mu_star!r}\n")
        fh.write(f"# dt={dt!r} T={T!r} seed={seed_tag}\n")
        fh.write("xi\n")
        for v in samples:
            fh.write(f"{float(v)!r}\n")
