"""Scenario construction: rate profiles, arrival laws and limit coefficients.

A scenario fixes a family of systems indexed by the server count n.  Pools
define per-server service rates b_i + c_i*n^{-1/2} + g_i(n) for floor(a_i*n +
f_i(n)) servers; the arrival law is a renewal process with mean-1 increments
scaled by lambda_n = n*lambda + sqrt(n)*lambda_hat.  From these we derive the
coefficients (sigma, beta, mu_star) of the limiting scaled head-count
dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import yaml

from .errors import ConfigurationError

DEFAULT_MU_LO = 0.1
DEFAULT_MU_HI = 10.0
DEFAULT_BETA_R = 0.6

_FLOOR_SNAP = 1e-9


def _snapped_floor(x: float) -> int:
    """floor(x) robust to float noise just below an integer (0.58*100 case)."""
    f = math.floor(x)
    if x - f > 1.0 - _FLOOR_SNAP:
        return f + 1
    return f


@dataclass(frozen=True)
class Pool:
    """One server pool: fraction a, base rate b, first-order perturbation c,
    and optional size/rate deviations f(n) = f_coef*n^f_exp, g(n) = g_coef*n^-g_exp."""

    a: float
    b: float
    c: float = 0.0
    f_exp: float = 0.0
    f_coef: float = 0.0
    g_exp: float = 1.0
    g_coef: float = 0.0

    def size(self, n: int) -> int:
        return _snapped_floor(self.a * n + self.f_coef * n**self.f_exp)

    def rate(self, n: int) -> float:
        return self.b + self.c / math.sqrt(n) + self.g_coef * n ** (-self.g_exp)


@dataclass(frozen=True)
class PoolSpec:
    pools: tuple[Pool, ...]
    mu_lo: float = DEFAULT_MU_LO
    mu_hi: float = DEFAULT_MU_HI

    def __post_init__(self):
        errs = self.check()
        if errs:
            raise ConfigurationError("; ".join(errs))

    def check(self) -> list[str]:
        errs = []
        if not self.pools:
            errs.append("at least one pool required")
            return errs
        total = sum(p.a for p in self.pools)
        if abs(total - 1.0) > 1e-12:
            errs.append(f"pool fractions sum to {total!r}, expected 1 within 1e-12")
        for i, p in enumerate(self.pools):
            if p.a <= 0:
                errs.append(f"pool {i}: fraction a={p.a} must be > 0")
            if p.b <= 0:
                errs.append(f"pool {i}: base rate b={p.b} must be > 0")
            if not 0.0 <= p.f_exp < 1.0:
                errs.append(f"pool {i}: f_exp={p.f_exp} must lie in [0, 1)")
            if p.g_exp <= 0:
                errs.append(f"pool {i}: g_exp={p.g_exp} must be > 0")
        if not 0 < self.mu_lo <= self.mu_hi:
            errs.append(f"rate band [{self.mu_lo}, {self.mu_hi}] invalid")
        return errs

    @property
    def mu(self) -> float:
        """First-order mean rate, sum of a_i*b_i."""
        return sum(p.a * p.b for p in self.pools)

    @property
    def mu_star(self) -> float:
        """Smallest base rate carried by a pool of positive fraction."""
        return min(p.b for p in self.pools if p.a > 0)


@dataclass(frozen=True)
class RateProfile:
    """Realized per-server rates for one system size."""

    rates: np.ndarray
    n_realized: int
    mu_limit: float          # first-order mean rate used for centering
    mu_star: float
    mu_bar_emp: float        # empirical mean of the realized rates
    second_order_sum: float  # n_realized^{-1/2} * sum_k (mu_k - mu_limit)
    pool_sizes: tuple[int, ...] = ()

    def count_below(self, threshold: float) -> int:
        return int(np.count_nonzero(self.rates < threshold))

    def slow_server_deficit(self, eps: float) -> float:
        """Scaled count of servers slower than mu_star - eps; 0 in standard scenarios."""
        return self.count_below(self.mu_star - eps) / math.sqrt(self.n_realized)


def _profile_from_rates(rates: np.ndarray, mu_limit: float, mu_star: float,
                        pool_sizes: tuple[int, ...] = ()) -> RateProfile:
    n = len(rates)
    return RateProfile(
        rates=rates,
        n_realized=n,
        mu_limit=mu_limit,
        mu_star=mu_star,
        mu_bar_emp=float(rates.mean()),
        second_order_sum=float((rates - mu_limit).sum() / math.sqrt(n)),
        pool_sizes=pool_sizes,
    )


def build_rate_profile(spec: PoolSpec, n: int) -> RateProfile:
    """Realize the pools at system size n.

    Pool sizes are floored independently; everything downstream uses the
    realized total rather than the nominal n, so the work-conservation and
    scaling identities stay exact.
    """
    if n < len(spec.pools):
        raise ConfigurationError(f"n={n} smaller than the number of pools")
    sizes = []
    chunks = []
    for i, p in enumerate(spec.pools):
        size = p.size(n)
        if size < 1:
            raise ConfigurationError(f"pool {i} realizes {size} servers at n={n}")
        rate = p.rate(n)
        if not spec.mu_lo <= rate <= spec.mu_hi:
            raise ConfigurationError(
                f"pool {i} rate {rate!r} at n={n} outside [{spec.mu_lo}, {spec.mu_hi}]")
        sizes.append(size)
        chunks.append(np.full(size, rate))
    rates = np.concatenate(chunks)
    return _profile_from_rates(rates, spec.mu, spec.mu_star, tuple(sizes))


def build_iid_profile(dist, n: int, rng: np.random.Generator,
                      mu_lo: float = DEFAULT_MU_LO, mu_hi: float = DEFAULT_MU_HI) -> RateProfile:
    """n independent rate draws from a finite distribution given as (value, prob) pairs."""
    pairs = [(float(v), float(p)) for v, p in dist if p > 0]
    if not pairs:
        raise ConfigurationError("empty support")
    values = np.array([v for v, _ in pairs])
    probs = np.array([p for _, p in pairs])
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"probabilities sum to {probs.sum()!r}")
    if values.min() < mu_lo or values.max() > mu_hi:
        raise ConfigurationError(f"support outside [{mu_lo}, {mu_hi}]")
    if n < 1:
        raise ConfigurationError("n must be positive")
    rates = rng.choice(values, size=n, p=probs)
    mu = float((values * probs).sum())
    return _profile_from_rates(rates, mu, float(values.min()))


# ---------------------------------------------------------------------------
# Arrival laws


@dataclass(frozen=True)
class ArrivalLaw:
    """Mean-1 interarrival increment law; scv is its squared coefficient of variation.

    Families: exponential, deterministic, erlang(k) (sum of k exponentials
    scaled to mean 1), hyperexp2(p, r1, r2) (balanced-means defaults r1=2p,
    r2=2(1-p)), uniform(width) on [1-w/2, 1+w/2].  All have strictly positive
    support and unit mean.
    """

    family: str
    k: int = 1
    p: float = 0.5
    r1: float = 1.0
    r2: float = 1.0
    width: float = 1.0

    @staticmethod
    def exponential() -> "ArrivalLaw":
        return ArrivalLaw("exponential")

    @staticmethod
    def deterministic() -> "ArrivalLaw":
        return ArrivalLaw("deterministic")

    @staticmethod
    def erlang(k: int) -> "ArrivalLaw":
        if k < 1 or k != int(k):
            raise ConfigurationError(f"erlang order k={k} must be a positive integer")
        return ArrivalLaw("erlang", k=int(k))

    @staticmethod
    def hyperexp2(p: float, r1: float | None = None, r2: float | None = None) -> "ArrivalLaw":
        if not 0 < p < 1:
            raise ConfigurationError(f"hyperexp2 weight p={p} must lie in (0, 1)")
        if r1 is None and r2 is None:
            r1, r2 = 2.0 * p, 2.0 * (1.0 - p)
        if r1 is None or r2 is None or r1 <= 0 or r2 <= 0:
            raise ConfigurationError("hyperexp2 needs both branch rates positive")
        mean = p / r1 + (1.0 - p) / r2
        if abs(mean - 1.0) > 1e-9:
            raise ConfigurationError(f"hyperexp2 mean {mean!r} != 1")
        return ArrivalLaw("hyperexp2", p=p, r1=float(r1), r2=float(r2))

    @staticmethod
    def uniform(width: float) -> "ArrivalLaw":
        if not 0 <= width < 2:
            raise ConfigurationError(f"uniform width {width} must lie in [0, 2)")
        return ArrivalLaw("uniform", width=width)

    @property
    def scv(self) -> float:
        if self.family == "exponential":
            return 1.0
        if self.family == "deterministic":
            return 0.0
        if self.family == "erlang":
            return 1.0 / self.k
        if self.family == "hyperexp2":
            second = 2.0 * self.p / self.r1**2 + 2.0 * (1.0 - self.p) / self.r2**2
            return second - 1.0
        if self.family == "uniform":
            return self.width**2 / 12.0
        raise ConfigurationError(f"unknown arrival family {self.family!r}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Block of i.i.d. mean-1 increments."""
        if self.family == "exponential":
            return rng.exponential(1.0, size)
        if self.family == "deterministic":
            return np.ones(size)
        if self.family == "erlang":
            return rng.gamma(self.k, 1.0 / self.k, size)
        if self.family == "hyperexp2":
            x = rng.exponential(1.0, size)
            branch = rng.random(size) < self.p
            return x * np.where(branch, 1.0 / self.r1, 1.0 / self.r2)
        if self.family == "uniform":
            return rng.uniform(1.0 - self.width / 2.0, 1.0 + self.width / 2.0, size)
        raise ConfigurationError(f"unknown arrival family {self.family!r}")

    def block_sampler(self, rng: np.random.Generator, block: int = 4096):
        """Callable yielding one increment per call, drawn in blocks."""
        buf = self.sample(rng, block)
        pos = 0

        def nxt() -> float:
            nonlocal buf, pos
            if pos == len(buf):
                buf = self.sample(rng, block)
                pos = 0
            v = buf[pos]
            pos += 1
            return v

        return nxt


def law_from_mapping(m: dict) -> ArrivalLaw:
    fam = m.get("family")
    if fam == "exponential":
        return ArrivalLaw.exponential()
    if fam == "deterministic":
        return ArrivalLaw.deterministic()
    if fam == "erlang":
        return ArrivalLaw.erlang(m["k"])
    if fam == "hyperexp2":
        return ArrivalLaw.hyperexp2(m["p"], m.get("r1"), m.get("r2"))
    if fam == "uniform":
        return ArrivalLaw.uniform(m["width"])
    raise ConfigurationError(f"unknown arrival family {fam!r}")


# ---------------------------------------------------------------------------
# Limit coefficients


@dataclass(frozen=True)
class LimitParams:
    """Coefficients of the limiting scaled head-count dynamics."""

    lam: float          # first-order arrival rate, equals the mean service rate
    lambda_hat: float   # second-order arrival coefficient
    mu_hat: float       # second-order rate-sum surrogate at the reference n
    sigma2: float       # lam * (scv + 1)
    beta_drift: float   # lambda_hat - mu_hat
    mu_star: float

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def compute_limit_params(spec: PoolSpec, arrival: ArrivalLaw, lambda_hat: float,
                         n_ref: int) -> LimitParams:
    """Critical loading sets lam equal to the mean rate; mu_hat is read off the
    realized profile at n_ref rather than derived symbolically."""
    mu = spec.mu
    mu_hat = build_rate_profile(spec, n_ref).second_order_sum
    sigma2 = mu * (arrival.scv + 1.0)
    return LimitParams(
        lam=mu,
        lambda_hat=lambda_hat,
        mu_hat=mu_hat,
        sigma2=sigma2,
        beta_drift=lambda_hat - mu_hat,
        mu_star=spec.mu_star,
    )


def arrival_rate_for_n(lam: float, lambda_hat: float, n: int) -> float:
    """lambda_n = n*lam + sqrt(n)*lambda_hat, held exactly at every n."""
    v = n * lam + math.sqrt(n) * lambda_hat
    if v <= 0:
        raise ConfigurationError(f"arrival rate {v!r} at n={n} is not positive")
    return v


# ---------------------------------------------------------------------------
# Scenario files


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description as read from a scenario YAML file."""

    name: str
    pool_spec: PoolSpec
    arrival: ArrivalLaw
    lambda_hat: float
    beta_r: float = DEFAULT_BETA_R
    xi0: float = 0.0
    ladder: tuple[int, ...] = (100, 400, 1600)
    horizon: float = 10.0
    t_probe: float = 10.0
    reps: int = 100
    sde_samples: int = 20000
    sde_dt: float = 1e-3
    master_seed: int = 0
    partition: dict | None = None   # {"epsilon": ..., "alpha": ...}
    lemma2: dict | None = None      # raw mapping, validated by analysis.Lemma2Config

    def limit_params(self, n_ref: int | None = None) -> LimitParams:
        n_ref = n_ref if n_ref is not None else max(self.ladder)
        return compute_limit_params(self.pool_spec, self.arrival, self.lambda_hat, n_ref)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def scenario_from_mapping(doc: dict, name: str = "scenario") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("scenario file must contain a mapping at top level")
    try:
        pools = tuple(
            Pool(
                a=float(p["a"]), b=float(p["b"]), c=float(p.get("c", 0.0)),
                f_exp=float(p.get("f_exp", 0.0)), f_coef=float(p.get("f_coef", 0.0)),
                g_exp=float(p.get("g_exp", 1.0)), g_coef=float(p.get("g_coef", 0.0)),
            )
            for p in doc["pools"]
        )
    except KeyError as exc:
        raise ConfigurationError(f"pool entry missing key {exc}") from exc
    band = doc.get("rate_band", {})
    spec = PoolSpec(pools, mu_lo=float(band.get("lo", DEFAULT_MU_LO)),
                    mu_hi=float(band.get("hi", DEFAULT_MU_HI)))
    arrival = law_from_mapping(doc.get("arrival", {"family": "exponential"}))
    horizon = float(doc.get("horizon", 10.0))
    return ScenarioConfig(
        name=str(doc.get("name", name)),
        pool_spec=spec,
        arrival=arrival,
        lambda_hat=float(doc.get("lambda_hat", 0.0)),
        beta_r=float(doc.get("beta_r", DEFAULT_BETA_R)),
        xi0=float(doc.get("xi0", 0.0)),
        ladder=tuple(int(n) for n in doc.get("ladder", (100, 400, 1600))),
        horizon=horizon,
        t_probe=float(doc.get("t_probe", horizon)),
        reps=int(doc.get("reps", 100)),
        sde_samples=int(doc.get("sde_samples", 20000)),
        sde_dt=float(doc.get("sde_dt", 1e-3)),
        master_seed=int(doc.get("master_seed", 0)),
        partition=doc.get("partition"),
        lemma2=doc.get("lemma2"),
    )


def scenario_to_mapping(cfg: ScenarioConfig) -> dict:
    """Plain mapping capturing every field (inverse of scenario_from_mapping),
    used to embed scenarios inside run manifests."""
    arrival = {"family": cfg.arrival.family}
    if cfg.arrival.family == "erlang":
        arrival["k"] = cfg.arrival.k
    elif cfg.arrival.family == "hyperexp2":
        arrival.update(p=cfg.arrival.p, r1=cfg.arrival.r1, r2=cfg.arrival.r2)
    elif cfg.arrival.family == "uniform":
        arrival["width"] = cfg.arrival.width
    return {
        "name": cfg.name,
        "arrival": arrival,
        "lambda_hat": cfg.lambda_hat,
        "pools": [
            {"a": p.a, "b": p.b, "c": p.c, "f_exp": p.f_exp, "f_coef": p.f_coef,
             "g_exp": p.g_exp, "g_coef": p.g_coef}
            for p in cfg.pool_spec.pools
        ],
        "rate_band": {"lo": cfg.pool_spec.mu_lo, "hi": cfg.pool_spec.mu_hi},
        "beta_r": cfg.beta_r,
        "xi0": cfg.xi0,
        "ladder": list(cfg.ladder),
        "horizon": cfg.horizon,
        "t_probe": cfg.t_probe,
        "reps": cfg.reps,
        "sde_samples": cfg.sde_samples,
        "sde_dt": cfg.sde_dt,
        "master_seed": cfg.master_seed,
        "partition": cfg.partition,
        "lemma2": cfg.lemma2,
    }


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    import os
    return scenario_from_mapping(doc, name=os.path.splitext(os.path.basename(str(path)))[0])


def validate_scenario(cfg: ScenarioConfig) -> list[str]:
    """Collect every invariant violation at once (empty list = valid)."""
    errs = cfg.pool_spec.check()
    if not 0.5 < cfg.beta_r <= 1.0:
        errs.append(f"beta_r={cfg.beta_r} outside the admissible range (1/2, 1]")
    try:
        cfg.arrival.scv
    except ConfigurationError as exc:
        errs.append(str(exc))
    if not cfg.ladder or any(n < 1 for n in cfg.ladder):
        errs.append(f"ladder {cfg.ladder} must list positive system sizes")
    if cfg.horizon <= 0:
        errs.append(f"horizon {cfg.horizon} must be positive")
    if cfg.t_probe < 0 or cfg.t_probe > cfg.horizon:
        errs.append(f"t_probe {cfg.t_probe} must lie in [0, horizon]")
    if cfg.reps < 1:
        errs.append(f"reps {cfg.reps} must be >= 1")
    if cfg.sde_dt <= 0:
        errs.append(f"sde_dt {cfg.sde_dt} must be positive")
    for n in cfg.ladder:
        try:
            profile = build_rate_profile(cfg.pool_spec, n)
            arrival_rate_for_n(cfg.pool_spec.mu, cfg.lambda_hat, profile.n_realized)
        except ConfigurationError as exc:
            errs.append(str(exc))
    if cfg.partition is not None:
        eps = cfg.partition.get("epsilon")
        alpha = cfg.partition.get("alpha")
        if eps is None or eps <= 0:
            errs.append(f"partition epsilon {eps} must be > 0")
        elif alpha is not None:
            mu_star = cfg.pool_spec.mu_star
            if not mu_star < alpha < mu_star + eps:
                errs.append(
                    f"partition alpha {alpha} must lie in ({mu_star}, {mu_star + eps})")
    if cfg.lemma2 is not None:
        from .analysis import Lemma2Config
        try:
            Lemma2Config.from_mapping(cfg.lemma2)
        except ConfigurationError as exc:
            errs.append(str(exc))
    return errs
