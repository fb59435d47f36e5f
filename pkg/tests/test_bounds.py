import numpy as np
import pytest

from adaptive_tamaraw.anonymity import (AnonymitySet, LengthCache, Pattern,
                                        attacker_accuracy, build_sets)
from adaptive_tamaraw.bounds import (bound_sweep, global_bound, set_bound,
                                     set_weights, weighted_delta)
from adaptive_tamaraw.tamaraw import TamarawParams, defended_lengths

from conftest import random_trace
from test_anonymity import burst_trace

GRID = [TamarawParams(0.05, 0.02, 10), TamarawParams(0.02, 0.05, 10),
        TamarawParams(0.1, 0.1, 20)]


class TestWeightedDelta:
    def test_single_site_bucket(self):
        assert weighted_delta([4, 4, 4]) == 1.0

    def test_all_distinct(self):
        assert weighted_delta([1, 2, 3]) == 3.0

    def test_majority_of_four_in_ten(self):
        sites = [0] * 4 + [1] * 3 + [2] * 2 + [3]
        assert weighted_delta(sites) == pytest.approx(2.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            weighted_delta([])

    def test_inverse_is_majority_vote_accuracy(self):
        rng = np.random.default_rng(83)
        for _ in range(20):
            sites = list(rng.integers(0, 5, size=int(rng.integers(1, 30))))
            # exhaustive guessing oracle: try every constant guess
            best = max(sum(s == guess for s in sites) / len(sites)
                       for guess in set(sites))
            assert 1.0 / weighted_delta(sites) == pytest.approx(best)
            assert 0 < 1.0 / weighted_delta(sites) <= 1.0


def world(groups):
    traces, patterns = [], []
    for pid, (site, members) in enumerate(groups):
        ids = []
        for m in members:
            ids.append(len(traces))
            traces.append(m)
        patterns.append(Pattern(pid, site, pid, tuple(ids)))
    return traces, patterns


class TestSetBound:
    def test_single_site_buckets_give_one(self):
        traces, patterns = world([
            (0, [burst_trace(5, 9, 0, 0), burst_trace(5, 9, 0, 1)])])
        aset = AnonymitySet(0, patterns)
        assert set_bound(aset, GRID[0], traces) == 1.0

    def test_perfectly_mixed_buckets_give_half(self):
        traces, patterns = world([
            (0, [burst_trace(4, 4, 0, 0), burst_trace(4, 4, 0, 1)]),
            (1, [burst_trace(4, 4, 1, 0), burst_trace(4, 4, 1, 1)])])
        aset = AnonymitySet(0, patterns)
        params = TamarawParams(0.05, 0.05, 50)
        assert set_bound(aset, params, traces) == 0.5

    def test_equals_weighted_inverse_delta_oracle(self):
        rng = np.random.default_rng(89)
        traces = [random_trace(rng, site_id=(i // 4) % 3, instance_id=i)
                  for i in range(24)]
        patterns = [Pattern(p, traces[p * 4].site_id, p,
                            tuple(range(p * 4, p * 4 + 4)))
                    for p in range(6)]
        aset = AnonymitySet(0, list(patterns))
        for params in GRID:
            buckets = {}
            for tid in aset.trace_ids():
                key = defended_lengths(traces[tid], params)
                buckets.setdefault(key, []).append(traces[tid].site_id)
            total = len(aset.trace_ids())
            oracle = sum(len(b) / total / weighted_delta(b)
                         for b in buckets.values())
            assert set_bound(aset, params, traces) == pytest.approx(
                oracle, abs=1e-9)


class TestGlobalBound:
    def _sets_and_cache(self, rng, n_patterns=8, k=2):
        traces = [random_trace(rng, site_id=(i // 3) % 4, instance_id=i)
                  for i in range(n_patterns * 3)]
        patterns = [Pattern(p, traces[p * 3].site_id, p,
                            tuple(range(p * 3, p * 3 + 3)))
                    for p in range(n_patterns)]
        cache = LengthCache(traces, GRID)
        return traces, build_sets(patterns, k, GRID, cache), cache

    def test_single_set_equals_its_accuracy(self):
        rng = np.random.default_rng(97)
        traces, sets, cache = self._sets_and_cache(rng, n_patterns=4, k=4)
        assert len(sets) == 1
        members = [traces[i] for i in sets[0].trace_ids()]
        for pi, params in enumerate(GRID):
            expected = attacker_accuracy(members, params)
            assert global_bound(sets, cache, pi) == pytest.approx(expected)

    def test_two_sets_equal_weights_mean(self):
        rng = np.random.default_rng(101)
        traces, sets, cache = self._sets_and_cache(rng, n_patterns=8, k=4)
        assert len(sets) == 2
        a0 = attacker_accuracy([traces[i] for i in sets[0].trace_ids()], GRID[0])
        a1 = attacker_accuracy([traces[i] for i in sets[1].trace_ids()], GRID[0])
        value = global_bound(sets, cache, 0, weights=[0.5, 0.5])
        assert value == pytest.approx((a0 + a1) / 2)

    def test_weight_sum_violation(self):
        rng = np.random.default_rng(103)
        _, sets, cache = self._sets_and_cache(rng)
        with pytest.raises(ValueError, match="sum to 1"):
            global_bound(sets, cache, 0, weights=[0.9] * len(sets))

    def test_default_weights_are_trace_shares(self):
        rng = np.random.default_rng(107)
        _, sets, _ = self._sets_and_cache(rng)
        weights = set_weights(sets)
        totals = [len(s.trace_ids()) for s in sets]
        assert weights == pytest.approx([t / sum(totals) for t in totals])
        assert set_weights(sets, "uniform") == [1 / len(sets)] * len(sets)

    def test_grid_permutation_leaves_mean_unchanged(self):
        rng = np.random.default_rng(109)
        traces, sets, cache = self._sets_and_cache(rng)
        values = [global_bound(sets, cache, pi) for pi in range(len(GRID))]
        permuted_cache = LengthCache(traces, list(reversed(GRID)))
        permuted = [global_bound(sets, permuted_cache, pi)
                    for pi in range(len(GRID))]
        assert sorted(values) == pytest.approx(sorted(permuted))
        assert np.mean(values) == pytest.approx(np.mean(permuted))


class TestBoundSweep:
    def test_aggregate_is_mean_over_grid(self):
        rng = np.random.default_rng(113)
        traces = [random_trace(rng, site_id=(i // 3) % 4, instance_id=i)
                  for i in range(36)]
        patterns = [Pattern(p, traces[p * 3].site_id, p,
                            tuple(range(p * 3, p * 3 + 3)))
                    for p in range(12)]
        cache = LengthCache(traces, GRID)
        sets_by = {(k, 10): build_sets(patterns, k, GRID, cache)
                   for k in (2, 3)}
        caches = {key: cache for key in sets_by}
        report = bound_sweep(sets_by, caches)
        for key, bounds_list in report.per_config.items():
            assert report.aggregate[key] == pytest.approx(
                float(np.mean(bounds_list)))
            assert all(0 < b <= 1 for b in bounds_list)
        assert "switch" in report.caveat
