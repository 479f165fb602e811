"""Sampled-subset construction and the rank permutation that drives routing.

One service-time observation is taken from each of r = floor(n^beta_r)
randomly chosen servers before routing begins.  Ranks run from 1 (least
preferred) to n (most preferred): unsampled servers occupy ranks r+1..n in
index order, sampled servers occupy 1..r ordered by their estimated rate
1/sigma_k, shorter observation meaning higher rank.  Server indices are
0-based throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .scenario import RateProfile


def subset_size(n: int, beta_r: float) -> int:
    """r = floor(n^beta_r); beta_r must lie in (1/2, 1]."""
    if not 0.5 < beta_r <= 1.0:
        raise ConfigurationError(f"beta_r={beta_r} outside (1/2, 1]")
    return min(n, int(math.floor(n**beta_r)))


def draw_subset(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform size-r subset of {0..n-1} via partial Fisher-Yates; sorted."""
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    pool = np.arange(n)
    offsets = rng.integers(0, n - np.arange(r))   # exact, one call
    for i in range(r):
        j = i + int(offsets[i])
        pool[i], pool[j] = pool[j], pool[i]
    out = pool[:r]
    out.sort()
    return out


def draw_samples(subset, rates: RateProfile | np.ndarray,
                 rng: np.random.Generator) -> dict[int, float]:
    """One exponential service-time observation per subset server (mean 1/mu_k)."""
    mu = rates.rates if isinstance(rates, RateProfile) else np.asarray(rates)
    out = {}
    for k in sorted(int(i) for i in subset):
        out[k] = float(rng.exponential(1.0 / mu[k]))
    return out


def build_rank(n: int, subset, samples: dict[int, float]) -> np.ndarray:
    """Rank array; rank[k] in 1..n.  Ties on equal observations (a float
    coincidence) go to the lower server index."""
    subset = sorted(int(i) for i in subset)
    if set(samples) != set(subset):
        raise ValueError("samples must be defined exactly on the subset")
    rank = np.zeros(n, dtype=np.int64)
    # sampled: largest observation = lowest rank
    by_obs = sorted(subset, key=lambda k: (-samples[k], k))
    for pos, k in enumerate(by_obs):
        rank[k] = pos + 1
    r = len(subset)
    in_subset = np.zeros(n, dtype=bool)
    in_subset[subset] = True
    pos = r + 1
    for k in range(n):
        if not in_subset[k]:
            rank[k] = pos
            pos += 1
    return rank


@dataclass(frozen=True)
class SamplePlan:
    """Frozen outcome of the sampling phase for one replication."""

    n: int
    r: int
    sigma_set: np.ndarray        # sorted sampled indices
    samples: dict[int, float]    # index -> observed service duration
    rank: np.ndarray             # rank[k] in 1..n

    @staticmethod
    def draw(profile: RateProfile, beta_r: float, rng: np.random.Generator) -> "SamplePlan":
        n = profile.n_realized
        r = subset_size(n, beta_r)
        subset = draw_subset(n, r, rng)
        samples = draw_samples(subset, profile, rng)
        rank = build_rank(n, subset, samples)
        return SamplePlan(n=n, r=r, sigma_set=subset, samples=samples, rank=rank)

    def mu_hat(self, k: int) -> float:
        return 1.0 / self.samples[k]

    def to_csv(self, path) -> None:
        """Diagnostic dump: index, sampled flag, observation, rank."""
        sampled = np.zeros(self.n, dtype=bool)
        sampled[self.sigma_set] = True
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index,sampled,sigma,rank\n")
            for k in range(self.n):
                sig = repr(self.samples[k]) if sampled[k] else ""
                fh.write(f"{k},{int(sampled[k])},{sig},{self.rank[k]}\n")
