"""Statistical and pathwise verification of the limit claims.

Four instruments:

* ks_distance, the convergence metric between simulated scaled marginals and
  solver marginals;
* lemma-style checks: the vanishing idle time of high-rate servers (sup of
  the scaled class-2 idle count) and the sampled-ordering concentration
  events with their analytic Chernoff bounds;
* the dominance audit: recovers the noise a recorded path actually
  experienced, drives the comparator integral equation with it, and checks
  the scaled head count never drops below the comparator;
* the structural invariant audit over full event recordings.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .replicate import parallel_map, run_one
from .scenario import LimitParams, RateProfile, ScenarioConfig
from .simcore import PathRecord, PolicyKind, RecordOptions


# ---------------------------------------------------------------------------
# Empirical-CDF distance


def ks_distance(a, b) -> float:
    """Exact sup-norm distance between two empirical CDFs (two-pointer merge)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("ks_distance needs two nonempty samples")
    i = j = 0
    d = 0.0
    while i < na and j < nb:
        x = a[i] if a[i] <= b[j] else b[j]
        while i < na and a[i] <= x:
            i += 1
        while j < nb and b[j] <= x:
            j += 1
        diff = abs(i / na - j / nb)
        if diff > d:
            d = diff
    return d


# ---------------------------------------------------------------------------
# Server classes by rate


@dataclass(frozen=True)
class ClassPartition:
    """Rate bands [lo, mu_star - eps), [mu_star - eps, alpha), [alpha, hi]."""

    mu_star: float
    epsilon: float
    alpha: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon={self.epsilon} must be > 0")
        if not self.mu_star < self.alpha < self.mu_star + self.epsilon:
            raise ConfigurationError(
                f"alpha={self.alpha} must lie in ({self.mu_star}, "
                f"{self.mu_star + self.epsilon})")

    @staticmethod
    def default(profile: RateProfile) -> "ClassPartition":
        spread = float(profile.rates.max() - profile.rates.min())
        eps = 0.1 * spread if spread > 0 else 0.1
        return ClassPartition(profile.mu_star, eps, profile.mu_star + eps / 2.0)

    def class_indices(self, profile: RateProfile) -> np.ndarray:
        rates = profile.rates
        cls = np.ones(len(rates), dtype=np.int8)
        cls[rates < self.mu_star - self.epsilon] = 0
        cls[rates >= self.alpha] = 2
        return cls

    def meta(self) -> dict:
        return {"mu_star": self.mu_star, "epsilon": self.epsilon, "alpha": self.alpha}


def lemma1_idle_metric(path: PathRecord, partition: ClassPartition, t_bar: float) -> float:
    """sup over recorded times <= t_bar of n^{-1/2} * (idle servers in class 2)."""
    rec = path.meta.get("partition")
    if rec is None:
        raise ValueError("path was recorded without class-idle tracking")
    want = partition.meta()
    if any(abs(rec[k] - want[k]) > 1e-12 for k in want):
        raise ValueError(f"path partition {rec} does not match requested {want}")
    mask = path.t <= t_bar
    if not mask.any():
        raise ValueError(f"no recorded state at or before t={t_bar}")
    return float(path.I_class[2, mask].max() / math.sqrt(path.n))


# ---------------------------------------------------------------------------
# Sampled-ordering concentration events and their Chernoff bounds


@dataclass(frozen=True)
class Lemma2Config:
    """Parameters of the ordering-error concentration events.

    The admissibility condition phi*gamma < beta_exp - 1/2 - kappa and
    beta_exp - 1/2 + kappa < psi*gamma is enforced at construction; outside
    it the events are not guaranteed to vanish and the estimators refuse to
    run.  nu and eta are the Chernoff evaluation parameters (any positive
    value yields a valid bound).
    """

    phi: float
    psi: float
    beta_exp: float
    c1: float = 1.0
    c2: float = 1.0
    gamma: float = 0.18
    kappa: float = 0.05
    nu: float = 1.0
    eta: float = 1.0
    mc_ladder: tuple[int, ...] = (10_000, 1_000_000, 100_000_000)
    reps: int = 200

    def __post_init__(self):
        errs = []
        if not 0 < self.phi < self.psi:
            errs.append(f"need 0 < phi < psi, got phi={self.phi}, psi={self.psi}")
        if self.beta_exp <= 0.5:
            errs.append(f"beta_exp={self.beta_exp} must exceed 1/2")
        for name in ("c1", "c2", "gamma", "kappa", "nu", "eta"):
            if getattr(self, name) <= 0:
                errs.append(f"{name}={getattr(self, name)} must be > 0")
        if not errs:
            lo = self.beta_exp - 0.5 - self.kappa
            hi = self.beta_exp - 0.5 + self.kappa
            if not (self.phi * self.gamma < lo and hi < self.psi * self.gamma):
                errs.append(
                    f"admissibility violated: need phi*gamma={self.phi * self.gamma!r} "
                    f"< {lo!r} and {hi!r} < psi*gamma={self.psi * self.gamma!r}")
        if errs:
            raise ConfigurationError("; ".join(errs))

    @staticmethod
    def from_mapping(m: dict) -> "Lemma2Config":
        kw = {k: m[k] for k in ("phi", "psi", "beta_exp", "c1", "c2", "gamma",
                                "kappa", "nu", "eta") if k in m}
        if "mc_ladder" in m:
            kw["mc_ladder"] = tuple(int(v) for v in m["mc_ladder"])
        if "reps" in m:
            kw["reps"] = int(m["reps"])
        missing = [k for k in ("phi", "psi", "beta_exp") if k not in kw]
        if missing:
            raise ConfigurationError(f"lemma2 config missing keys: {missing}")
        return Lemma2Config(**kw)


@dataclass(frozen=True)
class Lemma2McResult:
    n: int
    reps: int
    p1_hat: float     # P(#{Phi_i >= theta_n} <= n^{1/2+kappa}) estimate
    p2_hat: float     # P(#{Psi_i >= theta_n} >= n^{1/2-kappa}) estimate
    l1: int
    l2: int
    theta_n: float
    thresh1: float
    thresh2: float
    degenerate1: bool  # threshold at or above l1: the event is certain
    counts1: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)
    counts2: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)

    def se(self, p: float) -> float:
        return math.sqrt(p * (1.0 - p) / self.reps)


def lemma2_mc(cfg: Lemma2Config, n: int, reps: int,
              rng: np.random.Generator) -> Lemma2McResult:
    """Monte-Carlo estimates of the two ordering-error events at size n."""
    if reps < 1:
        raise ConfigurationError(f"reps={reps} must be >= 1")
    theta = cfg.gamma * math.log(n) if n > 1 else 0.0
    l1 = int(math.floor(cfg.c1 * n**cfg.beta_exp))
    l2 = int(math.floor(cfg.c2 * n**cfg.beta_exp))
    if l1 < 1 or l2 < 1:
        raise ConfigurationError(f"counts l1={l1}, l2={l2} must be >= 1 (n too small)")
    thresh1 = n ** (0.5 + cfg.kappa)
    thresh2 = n ** (0.5 - cfg.kappa)
    degenerate1 = thresh1 >= l1
    if degenerate1:
        warnings.warn(
            f"n={n}: threshold n^(1/2+kappa)={thresh1:.1f} >= l1={l1}; the first "
            "event is certain and the asymptotic regime is not reached", stacklevel=2)
    c1 = np.empty(reps, dtype=np.int64)
    c2 = np.empty(reps, dtype=np.int64)
    for rep in range(reps):
        c1[rep] = int((rng.exponential(1.0 / cfg.phi, l1) >= theta).sum())
        c2[rep] = int((rng.exponential(1.0 / cfg.psi, l2) >= theta).sum())
    return Lemma2McResult(
        n=n, reps=reps,
        p1_hat=float((c1 <= thresh1).mean()),
        p2_hat=float((c2 >= thresh2).mean()),
        l1=l1, l2=l2, theta_n=theta, thresh1=thresh1, thresh2=thresh2,
        degenerate1=degenerate1, counts1=c1, counts2=c2,
    )


@dataclass(frozen=True)
class Lemma2Bounds:
    n: int
    bound1: float      # clipped to [0, 1]; 1.0 means vacuous at this n
    bound2: float
    log_bound1: float  # raw exponents, useful when the bounds underflow
    log_bound2: float
    vacuous1: bool
    vacuous2: bool


def lemma2_bounds(cfg: Lemma2Config, n: int) -> Lemma2Bounds:
    """Analytic Chernoff bounds for the two events, evaluated with
    alpha = nu*log(n) and the fixed eta."""
    ln = math.log(n) if n > 1 else 0.0
    log_b1 = (cfg.nu * ln * n ** (0.5 + cfg.kappa)
              - (cfg.c1 * n**cfg.beta_exp - 1.0)
              * n ** (-cfg.phi * cfg.gamma) * (1.0 - n ** (-cfg.nu)))
    log_b2 = (-cfg.eta * n ** (0.5 - cfg.kappa)
              + cfg.c2 * n**cfg.beta_exp * n ** (-cfg.psi * cfg.gamma)
              * (math.exp(-cfg.eta) - 1.0))
    def clip(lb: float) -> float:
        return 1.0 if lb >= 0 else math.exp(lb)
    return Lemma2Bounds(
        n=n,
        bound1=clip(log_b1), bound2=clip(log_b2),
        log_bound1=log_b1, log_bound2=log_b2,
        vacuous1=log_b1 >= 0, vacuous2=log_b2 >= 0,
    )


# ---------------------------------------------------------------------------
# Dominance audit


@dataclass
class DominanceAudit:
    """Pathwise comparison of the scaled head count against the comparator
    driven by the path's own recovered noise."""

    b: float                       # finite-n drift from realized rates
    v_n: float
    delta_n: float
    zeta_n: float
    tol: float
    max_gap: float                 # max of (comparator - v_n*t) - xhat, <= 0 when clean
    violations: list               # (t, gap) where xhat < comparator - v_n*t - tol
    conservation_breaches: list    # (t, X, Q, I) rows contradicting the idling identities
    W: np.ndarray = field(repr=False, default=None)
    xi1: np.ndarray = field(repr=False, default=None)
    xhat: np.ndarray = field(repr=False, default=None)
    times: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.conservation_breaches


def _pick_delta(profile: RateProfile) -> float:
    """Smallest delta with #{k: mu_k < mu_star - delta} <= n^{1/4}; 0 when no
    server is slower than mu_star."""
    mu_star = profile.mu_star
    slow = np.sort(profile.rates[profile.rates < mu_star])
    if len(slow) == 0:
        return 0.0
    budget = int(math.floor(profile.n_realized**0.25))
    if len(slow) <= budget:
        return 0.0
    # drop all but the `budget` slowest by pushing delta just past that rate
    cut = slow[budget] if budget > 0 else slow[0]
    return max(mu_star - cut, 0.0)


def dominance_audit(path: PathRecord, profile: RateProfile, limit: LimitParams,
                    lambda_n: float, delta_n: float | None = None,
                    tol: float | None = None) -> DominanceAudit:
    """Recover the noise W from the recorded path, drive the comparator with
    it, and flag every time the scaled head count falls below the comparator
    beyond the declared correction and tolerance."""
    if len(path.idle_rate_integral) != len(path.t):
        raise ValueError("path lacks the idle-rate integral tracker")
    n = profile.n_realized
    sq = math.sqrt(n)
    t = path.t
    xhat = (path.X - n) / sq
    F = path.idle_rate_integral / sq
    b = (lambda_n - n * limit.lam) / sq - profile.second_order_sum
    W = xhat - xhat[0] - b * t - F

    derived_q = np.maximum(path.X - n, 0)
    derived_i = np.maximum(n - path.X, 0)
    bad = np.nonzero((derived_q != path.Q) | (derived_i != path.I))[0]
    breaches = [(float(t[j]), int(path.X[j]), int(path.Q[j]), int(path.I[j]))
                for j in bad[:32]]

    mu_star = limit.mu_star
    xi1 = np.empty_like(t)
    xi1[0] = xhat[0]
    x = xi1[0]
    for j in range(len(t) - 1):
        dt = t[j + 1] - t[j]
        x = x + (W[j + 1] - W[j]) + b * dt + mu_star * max(-x, 0.0) * dt
        xi1[j + 1] = x

    if delta_n is None:
        delta_n = 0.0 if float(profile.rates.min()) >= mu_star else _pick_delta(profile)
    zeta_n = profile.count_below(mu_star - delta_n) / sq if delta_n >= 0 else 0.0
    ihat_sup = float(np.maximum(-xhat, 0.0).max())
    v_n = delta_n * ihat_sup + mu_star * zeta_n

    if tol is None:
        gaps = np.diff(t)
        max_gap = float(gaps.max()) if len(gaps) else 0.0
        xi1_neg_sup = float(np.maximum(-xi1, 0.0).max())
        tol = 1e-6 + mu_star * max_gap * xi1_neg_sup

    slack = xi1 - v_n * t - xhat          # > tol marks a violation
    max_gap_val = float(slack.max())
    idx = np.nonzero(slack > tol)[0]
    violations = [(float(t[j]), float(slack[j])) for j in idx[:1000]]
    return DominanceAudit(
        b=b, v_n=v_n, delta_n=float(delta_n), zeta_n=float(zeta_n), tol=float(tol),
        max_gap=max_gap_val, violations=violations,
        conservation_breaches=breaches,
        W=W, xi1=xi1, xhat=xhat, times=t,
    )


# ---------------------------------------------------------------------------
# Structural invariant audit


@dataclass(frozen=True)
class InvariantReport:
    ok: bool
    events: int
    first_failure: tuple | None    # (row index, message)

    def __bool__(self):
        return self.ok


def invariant_audit(path: PathRecord, n: int | None = None) -> InvariantReport:
    """Replay a full event recording and check the bookkeeping identities:
    buffer/idle derived from the head count, flow balance against the arrival
    and departure counters, and 0/1 busy flags under routing/departure
    increments."""
    if len(path.event_kind) != len(path.t):
        raise ValueError("invariant_audit needs a full event-time recording")
    n = n if n is not None else path.n
    rows = len(path.t)
    X, Q, I, A = path.X, path.Q, path.I, path.A

    def fail(j, msg):
        return InvariantReport(ok=False, events=rows, first_failure=(int(j), msg))

    d_run = 0
    busy = path.busy0.astype(np.int64).copy()
    if len(busy) != n:
        return fail(0, f"initial busy flags have length {len(busy)}, expected {n}")
    R = np.zeros(n, dtype=np.int64)
    D = np.zeros(n, dtype=np.int64)
    b0 = path.busy0.astype(np.int64)
    for j in range(rows):
        kind = int(path.event_kind[j])
        if kind == 0:
            k = int(path.srv_departed[j])
            D[k] += 1
            d_run += 1
            r = int(path.srv_routed[j])
            if r >= 0:
                if r != k:
                    return fail(j, f"buffered job routed to {r}, expected freed server {k}")
                R[r] += 1
            else:
                busy[k] -= 1
            if busy[k] != b0[k] + R[k] - D[k] or not 0 <= busy[k] <= 1:
                return fail(j, f"server {k} busy flag {busy[k]} outside {{0,1}}")
        elif kind == 1:
            r = int(path.srv_routed[j])
            if r >= 0:
                R[r] += 1
                busy[r] += 1
                if busy[r] != b0[r] + R[r] - D[r] or not 0 <= busy[r] <= 1:
                    return fail(j, f"server {r} busy flag {busy[r]} outside {{0,1}}")
        if X[j] != X[0] + A[j] - d_run:
            return fail(j, f"flow balance: X={X[j]} != X0 + A - D = {X[0] + A[j] - d_run}")
        if Q[j] != max(X[j] - n, 0):
            return fail(j, f"buffer {Q[j]} != (X-n)+ = {max(X[j] - n, 0)}")
        if I[j] != max(n - X[j], 0):
            return fail(j, f"idle count {I[j]} != (X-n)- = {max(n - X[j], 0)}")
    return InvariantReport(ok=True, events=rows, first_failure=None)


def fifo_audit(path: PathRecord) -> InvariantReport:
    """Jobs that waited must start service in arrival order, each exactly once,
    departing from the server they were routed to (non-interruption)."""
    if path.jobs is None:
        raise ValueError("fifo_audit needs a job log (record with job_log=True)")
    arr = path.jobs["arr_t"]
    route = path.jobs["route_t"]
    dep = path.jobs["dep_t"]
    server = path.jobs["server"]
    rows = len(arr)
    waited = np.nonzero(~np.isnan(route) & (route > arr))[0]
    starts = route[waited]
    if np.any(np.diff(starts) < 0):
        j = int(waited[np.nonzero(np.diff(starts) < 0)[0][0] + 1])
        return InvariantReport(False, rows, (j, "waited job served before an earlier arrival"))
    routed = ~np.isnan(route)
    if np.any(server[routed] < 0):
        j = int(np.nonzero(routed & (server < 0))[0][0])
        return InvariantReport(False, rows, (j, "routed job has no server"))
    served = ~np.isnan(dep)
    if np.any(np.isnan(route[served])):
        j = int(np.nonzero(served & np.isnan(route))[0][0])
        return InvariantReport(False, rows, (j, "job departed without being routed"))
    if np.any(dep[served] < route[served]):
        j = int(np.nonzero(served & (dep < route))[0][0])
        return InvariantReport(False, rows, (j, "departure precedes routing"))
    return InvariantReport(True, rows, None)


# ---------------------------------------------------------------------------
# Policy comparison


@dataclass(frozen=True)
class PolicyStats:
    policy: str
    reps: int
    mean_xhat: float
    ci_xhat: float        # 95% normal half-width
    mean_qint: float      # scaled buffer integral over [0, t_probe]
    ci_qint: float
    se_xhat: float


def _compare_worker(args):
    cfg, n, policy_name, rep, t_probe = args
    policy = PolicyKind(policy_name)
    step = t_probe if t_probe > 0 else cfg.horizon
    rec = RecordOptions(mode="grid", grid_step=step)
    path = run_one(cfg, n, policy, rep, record=rec)
    nr = path.n
    j = path.index_at(t_probe)
    sq = math.sqrt(nr)
    return ((path.X[j] - nr) / sq, path.queue_integral[j] / sq)


def policy_comparison(cfg: ScenarioConfig, n: int, policies, t_probe: float,
                      reps: int, workers: int = 1) -> tuple[list[PolicyStats], dict]:
    """Per-policy marginal means with 95% CIs across independent replications.

    Streams are independent across policies (no common random numbers): the
    sampling-plan randomness has no analogue under the other policies, and
    independent streams keep the CIs honest.
    """
    rows = []
    raw = {}
    for policy in policies:
        args = [(cfg, n, policy.value, rep, t_probe) for rep in range(reps)]
        res = parallel_map(_compare_worker, args, workers)
        xh = np.array([r[0] for r in res])
        qi = np.array([r[1] for r in res])
        # a single replication has no spread estimate; report degenerate CIs
        se_x = float(xh.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        se_q = float(qi.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        rows.append(PolicyStats(
            policy=policy.value, reps=reps,
            mean_xhat=float(xh.mean()), ci_xhat=1.96 * se_x,
            mean_qint=float(qi.mean()), ci_qint=1.96 * se_q,
            se_xhat=se_x,
        ))
        raw[policy.value] = {"xhat": xh, "qint": qi}
    return rows, raw


def _dominance_worker(args):
    cfg, n, policy_name, rep, horizon = args
    from .scenario import arrival_rate_for_n, build_rate_profile
    policy = PolicyKind(policy_name)
    path = run_one(cfg, n, policy, rep, record=RecordOptions(mode="full"),
                   horizon=horizon)
    profile = build_rate_profile(cfg.pool_spec, n)
    lim = cfg.limit_params()
    lambda_n = arrival_rate_for_n(cfg.pool_spec.mu, cfg.lambda_hat, profile.n_realized)
    audit = dominance_audit(path, profile, lim, lambda_n, delta_n=0.0)
    return (len(audit.violations), len(audit.conservation_breaches),
            audit.max_gap, audit.v_n, audit.tol)


def dominance_campaign(cfg: ScenarioConfig, n: int, policy: PolicyKind, reps: int,
                       workers: int = 1, horizon: float | None = None) -> dict:
    """Full-recording dominance audits over reps independent replications."""
    args = [(cfg, n, policy.value, rep, horizon) for rep in range(reps)]
    res = parallel_map(_dominance_worker, args, workers)
    return {
        "policy": policy.value,
        "reps": reps,
        "violations": int(sum(r[0] for r in res)),
        "conservation_breaches": int(sum(r[1] for r in res)),
        "max_gap": float(max(r[2] for r in res)),
        "v_n": float(max(r[3] for r in res)),
        "max_tol": float(max(r[4] for r in res)),
    }


def _lemma1_worker(args):
    cfg, n, rep, eps, alpha, t_bar = args
    from .scenario import build_rate_profile
    profile = build_rate_profile(cfg.pool_spec, n)
    part = ClassPartition(profile.mu_star, eps, alpha)
    rec = RecordOptions(mode="full", server_class=part.class_indices(profile),
                        partition_meta=part.meta())
    path = run_one(cfg, n, PolicyKind.PI0, rep, record=rec)
    return lemma1_idle_metric(path, part, t_bar)


def lemma1_campaign(cfg: ScenarioConfig, n: int, reps: int, partition_args: tuple,
                    t_bar: float, workers: int = 1) -> np.ndarray:
    """Idle metrics under the sampled-rank policy, one per replication."""
    eps, alpha = partition_args
    args = [(cfg, n, rep, eps, alpha, t_bar) for rep in range(reps)]
    return np.array(parallel_map(_lemma1_worker, args, workers))
