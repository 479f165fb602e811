import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hwqueue import (SamplePlan, build_rank, build_rate_profile, draw_samples,
                     draw_subset, subset_size)
from hwqueue.scenario import Pool, PoolSpec


def test_subset_size_values():
    assert subset_size(100, 0.6) == 15            # floor(10^1.2)
    assert subset_size(5, 1.0) == 5
    assert subset_size(1600, 0.6) == 83


def test_full_subset_forced():
    out = draw_subset(5, 5, np.random.default_rng(0))
    assert np.array_equal(out, np.arange(5))


def test_subset_rejects_oversize():
    with pytest.raises(ValueError):
        draw_subset(3, 4, np.random.default_rng(0))


def test_subset_inclusion_frequency():
    # binomial oracle: every index is included w.p. r/n = 0.01; check a few
    # probe indices against the 3-sigma band over 1e5 draws
    n, r, draws = 10_000, 100, 100_000
    rng = np.random.default_rng(314)
    hits = np.zeros(5, dtype=np.int64)
    probes = np.array([0, 17, 4999, 9000, 9999])
    counts = np.zeros(n, dtype=np.int64)
    for _ in range(draws):
        s = draw_subset(n, r, rng)
        counts[s] += 1
    se = math.sqrt(0.01 * 0.99 / draws)
    for i, p in enumerate(probes):
        freq = counts[p] / draws
        assert abs(freq - 0.01) <= 3 * se, (p, freq)
    # total inclusion mass is exactly r per draw
    assert counts.sum() == draws * r


def test_draw_samples_exponential_mean():
    # exponential oracle: mean 1/mu within 3 standard errors
    spec = PoolSpec((Pool(a=1.0, b=2.0),))
    profile = build_rate_profile(spec, 100_000)
    rng = np.random.default_rng(5)
    samples = draw_samples(np.arange(100_000), profile, rng)
    vals = np.fromiter(samples.values(), dtype=float)
    se = 0.5 / math.sqrt(len(vals))
    assert abs(vals.mean() - 0.5) <= 3 * se


def test_draw_samples_deterministic_and_empty():
    spec = PoolSpec((Pool(a=1.0, b=1.0),))
    profile = build_rate_profile(spec, 10)
    a = draw_samples([3], profile, np.random.default_rng(11))
    b = draw_samples([3], profile, np.random.default_rng(11))
    assert a == b and set(a) == {3}
    assert draw_samples([], profile, np.random.default_rng(0)) == {}


def test_rank_example():
    # two sampled servers; the shorter observation earns the higher rank,
    # unsampled servers sit above all sampled ones in index order
    rank = build_rank(5, [1, 3], {1: 0.5, 3: 2.0})
    assert rank.tolist() == [3, 2, 4, 1, 5]


def test_rank_empty_subset_is_identity():
    rank = build_rank(3, [], {})
    assert rank.tolist() == [1, 2, 3]


def test_rank_all_sampled_increasing_observations():
    n = 6
    samples = {k: float(k + 1) for k in range(n)}
    rank = build_rank(n, list(range(n)), samples)
    assert rank.tolist() == [n - k for k in range(n)]


def test_rank_tie_breaks_to_lower_index():
    rank = build_rank(4, [0, 2], {0: 1.0, 2: 1.0})
    assert rank[0] == 1 and rank[2] == 2


def test_unsampled_first_and_bijection_randomized():
    rng = np.random.default_rng(99)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        r = int(rng.integers(1, n + 1))
        subset = draw_subset(n, r, rng)
        samples = {int(k): float(rng.exponential(1.0)) for k in subset}
        rank = build_rank(n, subset, samples)
        assert sorted(rank.tolist()) == list(range(1, n + 1))
        in_s = np.zeros(n, dtype=bool)
        in_s[subset] = True
        if r < n:
            assert rank[~in_s].min() > rank[in_s].max()


@given(st.data())
@settings(max_examples=200, deadline=None)
def test_rank_monotone_in_observation(data):
    n = data.draw(st.integers(2, 12))
    r = data.draw(st.integers(1, n))
    subset = list(range(r))
    samples = {k: data.draw(st.floats(0.01, 100.0)) for k in subset}
    k = data.draw(st.integers(0, r - 1))
    before = build_rank(n, subset, samples)[k]
    shrunk = dict(samples)
    shrunk[k] = samples[k] * data.draw(st.floats(0.01, 1.0))
    after = build_rank(n, subset, shrunk)[k]
    assert after >= before


def test_sampled_order_exchangeable_chi_square():
    # with equal rates every ordering of the sampled servers is equally
    # likely; chi-square over the 3! patterns at n=4, r=3
    spec = PoolSpec((Pool(a=1.0, b=1.0),))
    profile = build_rate_profile(spec, 4)
    rng = np.random.default_rng(2718)
    counts = {}
    trials = 100_000
    for _ in range(trials):
        plan = SamplePlan.draw(profile, beta_r=0.8, rng=rng)
        assert plan.r == 3
        pattern = tuple(int(plan.rank[k]) for k in plan.sigma_set)
        counts[pattern] = counts.get(pattern, 0) + 1
    assert len(counts) == 6
    result = stats.chisquare(list(counts.values()))
    assert result.pvalue > 0.001


def test_plan_csv_dump(tmp_path):
    spec = PoolSpec((Pool(a=0.5, b=1.0), Pool(a=0.5, b=2.0)))
    profile = build_rate_profile(spec, 16)
    plan = SamplePlan.draw(profile, beta_r=0.6, rng=np.random.default_rng(1))
    out = tmp_path / "plan.csv"
    plan.to_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "index,sampled,sigma,rank"
    assert len(lines) == 17
    ranks = [int(l.split(",")[3]) for l in lines[1:]]
    assert sorted(ranks) == list(range(1, 17))
