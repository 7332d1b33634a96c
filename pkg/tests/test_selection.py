import itertools
import math

import numpy as np
import pytest
from scipy import stats

from fedselect import selection as sel
from fedselect.distributions import kl_divergence, uniform
from fedselect.registry import AggregateRegistry, Registry, RegistryScheme
from fedselect.selection import ClampWarning, SelectionConfig


def _agg_with(count, support, length=60):
    c = np.zeros(length, dtype=np.int64)
    c[0] = count
    c[1:support] = 1
    return AggregateRegistry(c)


def test_probability_examples():
    own = Registry(0, 60)
    assert sel.participation_probability(own, _agg_with(5, 10), 20) == pytest.approx(0.4)
    assert sel.participation_probability(own, _agg_with(1, 56), 20) == pytest.approx(20 / 56)
    assert sel.participation_probability(own, _agg_with(1, 10), 20) == 1.0
    with pytest.raises(ValueError):
        sel.participation_probability(own, AggregateRegistry(np.zeros(60, dtype=np.int64)), 20)


def test_clamp_warns():
    slots = np.arange(5)
    agg = AggregateRegistry(np.bincount(slots, minlength=10))
    with pytest.warns(ClampWarning):
        p = sel.participation_probabilities(slots, agg, 20)
    assert (p == 1).all()


def test_expectation_identities_algebraic(skewed):
    s = RegistryScheme.default()
    d = sel.DubheSelector.from_counts(skewed.counts, s, 20)
    assert d.agg.support > 20
    assert d.probs.max() < 1
    assert d.probs.sum() == pytest.approx(20, abs=1e-9)
    for slot in np.flatnonzero(d.agg.counts):
        assert d.probs[d.slots == slot].sum() == pytest.approx(20 / d.agg.support, abs=1e-9)


def test_draw_edge_cases():
    rng = np.random.default_rng(0)
    assert sel.draw_dubhe(np.zeros(50), rng).size == 0
    assert sel.draw_dubhe(np.ones(5), rng).tolist() == [0, 1, 2, 3, 4]


def test_fix_cardinality_cases():
    rng = np.random.default_rng(0)
    S = np.array([3, 1, 4])
    assert sel.fix_cardinality(S, 3, 10, rng).tolist() == [1, 3, 4]
    full = sel.fix_cardinality([], 20, 100, rng)
    assert full.size == 20 and np.unique(full).size == 20
    shrunk = sel.fix_cardinality(np.arange(30), 10, 100, rng)
    assert shrunk.size == 10 and set(shrunk) <= set(range(30))
    grown = sel.fix_cardinality(np.arange(5), 8, 100, rng)
    assert set(range(5)) <= set(grown)
    with pytest.raises(ValueError):
        sel.fix_cardinality([], 11, 10, rng)


def test_fix_cardinality_additions_uniform_chi2():
    rng = np.random.default_rng(1)
    N, members = 30, np.arange(10)
    hits = np.zeros(N)
    for _ in range(10_000):
        out = sel.fix_cardinality(members, 15, N, rng)
        hits[np.setdiff1d(out, members)] += 1
    observed = hits[10:]
    assert stats.chisquare(observed).pvalue > 0.001


def test_fix_cardinality_removals_uniform_chi2():
    rng = np.random.default_rng(2)
    kept = np.zeros(20)
    for _ in range(10_000):
        kept[sel.fix_cardinality(np.arange(20), 5, 100, rng)] += 1
    assert stats.chisquare(kept).pvalue > 0.001


def test_random_selection():
    rng = np.random.default_rng(0)
    assert sel.select_random(7, 7, rng).tolist() == list(range(7))
    a = sel.select_random(100, 10, np.random.default_rng(5))
    b = sel.select_random(100, 10, np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sel.select_random(5, 6, rng)


def test_greedy_complementary_pair():
    counts = np.array([[10, 0], [0, 10], [10, 0], [10, 0]])
    for seed in range(5):
        S = sel.select_greedy(counts, 2, np.random.default_rng(seed))
        assert sel.kl_to_uniform(counts, S) == pytest.approx(0.0)


def test_greedy_never_beats_brute_force_optimum():
    rng = np.random.default_rng(3)
    for _ in range(20):
        N, K = int(rng.integers(5, 13)), int(rng.integers(2, 5))
        counts = rng.integers(0, 10, size=(N, 4)) + (rng.random((N, 4)) < 0.3) * 20
        counts[counts.sum(axis=1) == 0, 0] = 1
        best = min(sel.kl_to_uniform(counts, list(S)) for S in itertools.combinations(range(N), K))
        S = sel.select_greedy(counts, K, rng)
        assert sel.kl_to_uniform(counts, S) >= best - 1e-12


def test_greedy_uses_selected_to_uniform_kl():
    # a client whose pooled distribution has zero mass somewhere stays finite in this direction
    counts = np.array([[5, 5, 0], [5, 0, 5], [0, 5, 5]])
    S = sel.select_greedy(counts, 2, np.random.default_rng(0))
    p = counts[S].sum(axis=0) / counts[S].sum()
    assert math.isfinite(kl_divergence(p, uniform(3)))


def test_greedy_kernel_matches_direct_kl():
    from fedselect import kernels

    rng = np.random.default_rng(4)
    cand = rng.integers(0, 20, size=(40, 6)).astype(float)
    cur = rng.integers(0, 20, size=6).astype(float)
    taken = np.zeros(40, dtype=np.bool_)
    taken[:3] = True
    scores = kernels.greedy_kl_scores(cur, cand, taken)
    assert np.isinf(scores[:3]).all()
    for k in range(3, 40):
        m = cur + cand[k]
        assert scores[k] == pytest.approx(kl_divergence(m / m.sum(), uniform(6)), abs=1e-12)


def test_greedy_balances_skewed_federation(skewed):
    g = sel.make_selector("greedy", skewed.counts, 20)
    vals = [sel.multi_time_select(g, skewed.counts, 1, 0, r).emd_star for r in range(20)]
    assert np.mean(vals) <= 0.0144 + 0.05


def test_multi_time_h1_equals_single_selection(skewed, no_clamp_warnings):
    d = sel.make_selector("dubhe", skewed.counts, 20)
    out = sel.multi_time_select(d, skewed.counts, 1, 9, 4)
    assert np.array_equal(out.selected, d(sel.sub_rng(9, 4, 0)))
    assert out.tries_used == 1 and out.best_try == 0


def test_multi_time_keeps_minimum(skewed, no_clamp_warnings):
    d = sel.make_selector("dubhe", skewed.counts, 20)
    out = sel.multi_time_select(d, skewed.counts, 7, 1)
    assert out.emd_star == min(out.try_emds)
    assert out.best_try == out.try_emds.index(out.emd_star)
    assert out.selected.size == 20
    # a larger H extends the same streams, so the best can only improve
    more = sel.multi_time_select(d, skewed.counts, 12, 1)
    assert more.emd_star <= out.emd_star
    with pytest.raises(ValueError):
        sel.multi_time_select(d, skewed.counts, 0, 1)


def test_selection_determinism(skewed):
    d = sel.make_selector("dubhe", skewed.counts, 20)
    a = sel.multi_time_select(d, skewed.counts, 3, 42).to_json()
    b = sel.multi_time_select(d, skewed.counts, 3, 42).to_json()
    assert a == b


def test_selection_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(K=0)
    with pytest.raises(ValueError):
        SelectionConfig(H=0)
    with pytest.raises(ValueError):
        SelectionConfig(strategy="loss")


def test_default_grid():
    g = sel.default_grid(RegistryScheme.default())
    assert len(g) == 7 * 9
    assert g[0] == (0.3, 0.05, 0.0)
    assert g[-1] == (0.9, 0.45, 0.0)
    assert all(s1 <= 1 and s2 <= 0.5 for s1, s2, _ in g)


def test_parameter_search_contracts(small_ds, no_clamp_warnings):
    s = RegistryScheme.default()
    best, score, trace = sel.parameter_search(small_ds.counts, s, [(0.6, 0.2)], 2, 10, 0)
    assert best == (0.6, 0.2, 0.0) and score == trace[0].score
    best, score, trace = sel.parameter_search(small_ds.counts, s, None, 2, 10, 0)
    assert len(trace) == 63
    assert all(score <= p.score for p in trace)
    first = next(p for p in trace if p.score == score)
    assert first.sigma == best
    with pytest.raises(ValueError):
        sel.parameter_search(small_ds.counts, s, [], 2, 10, 0)


def test_parameter_search_neighbourhood(skewed, no_clamp_warnings):
    # H=20 leaves enough sampling noise to flip between threshold plateaus
    best, _, _ = sel.parameter_search(skewed.counts, RegistryScheme.default(), None, 100, 20, 0)
    assert 0.5 <= best[0] <= 0.9
    assert 0.05 <= best[1] <= 0.2
