import numpy as np
import pytest

from adaptive_tamaraw.patterns import (MinerConfig, dynamic_threshold,
                                       expansion_ratio,
                                       mine_patterns_from_vectors,
                                       similarity_matrix)
from adaptive_tamaraw.synth import tam_separation_ratio
from adaptive_tamaraw.trace import TAM


def planted_vectors(rng, sizes, dim=40, gap=30.0, spread=1.0):
    """Gaussian blobs at well-separated centers; labels returned."""
    vectors, labels = [], []
    for lab, size in enumerate(sizes):
        center = np.zeros(dim)
        center[lab * 3 % dim] = gap * (lab + 1)
        center[(lab * 5 + 1) % dim] = gap
        for _ in range(size):
            vectors.append(center + spread * rng.standard_normal(dim))
            labels.append(lab)
    return np.maximum(np.stack(vectors), 0.0), labels


def adjusted_rand(a, b):
    from sklearn.metrics import adjusted_rand_score
    return adjusted_rand_score(a, b)


class TestSimilarityMatrix:
    def test_duplicates_clamp_to_similarity_one(self):
        vectors = np.array([[1.0, 2.0], [1.0, 2.0], [4.0, 6.0]])
        sim = similarity_matrix(vectors, 1)
        assert sim.values[0, 1] == pytest.approx(1.0)
        assert np.all(sim.local_scales > 0)

    def test_default_neighbor_rank_is_seven(self):
        from adaptive_tamaraw.patterns import DEFAULT_K_NEIGHBORS
        assert DEFAULT_K_NEIGHBORS == 7

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(21)
        vectors = rng.uniform(0, 5, size=(5, 12))
        k = 2
        sim = similarity_matrix(vectors, k)
        # independent recomputation, pair by pair
        for x in range(5):
            dists = sorted(np.linalg.norm(vectors[x] - vectors[y])
                           for y in range(5) if y != x)
            assert sim.local_scales[x] == pytest.approx(dists[k - 1])
        for x in range(5):
            for y in range(5):
                d = np.linalg.norm(vectors[x] - vectors[y])
                expected = np.exp(-d ** 2 / (sim.local_scales[x]
                                             * sim.local_scales[y]))
                if x == y:
                    expected = 1.0
                assert sim.values[x, y] == pytest.approx(expected)

    def test_symmetry_unit_diagonal(self):
        rng = np.random.default_rng(2)
        sim = similarity_matrix(rng.uniform(size=(8, 5)), 3)
        assert np.allclose(sim.values, sim.values.T)
        assert np.allclose(np.diag(sim.values), 1.0)

    def test_too_few_traces(self):
        with pytest.raises(ValueError):
            similarity_matrix(np.ones((1, 4)), 1)
        with pytest.raises(ValueError):
            similarity_matrix(np.ones((4, 4)), 4)


class TestDynamicThreshold:
    def _from_values(self, values):
        from adaptive_tamaraw.patterns import SimilarityMatrix
        v = np.asarray(values, dtype=float)
        return SimilarityMatrix(v, np.ones(v.shape[0]))

    def test_constant_matrix(self):
        sim = self._from_values(np.full((5, 5), 0.7))
        assert dynamic_threshold(sim) == pytest.approx(0.7)

    def test_single_pair(self):
        sim = self._from_values([[1.0, 0.4], [0.4, 1.0]])
        assert dynamic_threshold(sim) == pytest.approx(0.4)

    def test_four_traces_sum_over_six(self):
        rng = np.random.default_rng(3)
        m = rng.uniform(0.1, 0.9, size=(4, 4))
        m = (m + m.T) / 2
        np.fill_diagonal(m, 1.0)
        sim = self._from_values(m)
        total = sum(m[x, y] for x in range(4) for y in range(x + 1, 4))
        assert dynamic_threshold(sim) == pytest.approx(total / 6)


class TestMinePatterns:
    def test_recovers_two_planted_groups(self):
        rng = np.random.default_rng(17)
        vectors, labels = planted_vectors(rng, [20, 20])
        result = mine_patterns_from_vectors(vectors, 0, MinerConfig())
        assert len(result.clusters) == 2
        assert adjusted_rand(labels, result.labels()) == 1.0

    def test_all_identical_single_cluster(self):
        vectors = np.tile(np.array([1.0, 2.0, 3.0]), (10, 1))
        result = mine_patterns_from_vectors(vectors, 0, MinerConfig())
        assert len(result.clusters) == 1
        assert sorted(result.clusters[0]) == list(range(10))

    def test_max_clusters_default_and_merge_down(self):
        assert MinerConfig().max_clusters == 6
        rng = np.random.default_rng(23)
        vectors, _ = planted_vectors(rng, [4] * 9, gap=40.0, spread=0.3)
        result = mine_patterns_from_vectors(vectors, 0, MinerConfig())
        assert len(result.clusters) <= 6
        flat = sorted(i for c in result.clusters for i in c)
        assert flat == list(range(36))

    def test_cleaning_fixed_point(self):
        rng = np.random.default_rng(29)
        for trial in range(5):
            vectors, _ = planted_vectors(rng, [6, 6, 6], gap=8.0, spread=2.0)
            config = MinerConfig(max_clusters=10)
            result = mine_patterns_from_vectors(vectors, 0, config)
            if not result.cleaning_converged:
                continue
            sim = similarity_matrix(vectors, min(7, len(vectors) - 1)).values
            labels = result.labels()
            for x in range(len(vectors)):
                own = [i for i, l in enumerate(labels) if l == labels[x]]
                own_aff = sim[x, own].mean()
                for other in set(labels) - {labels[x]}:
                    members = [i for i, l in enumerate(labels) if l == other]
                    assert sim[x, members].mean() <= own_aff + 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(31)
        vectors, _ = planted_vectors(rng, [8, 8, 8], gap=10.0, spread=2.0)
        a = mine_patterns_from_vectors(vectors, 0, MinerConfig())
        b = mine_patterns_from_vectors(vectors.copy(), 0, MinerConfig())
        assert a.clusters == b.clusters

    def test_partition_property(self):
        rng = np.random.default_rng(37)
        for _ in range(5):
            n = int(rng.integers(6, 25))
            vectors = rng.uniform(0, 4, size=(n, 16))
            result = mine_patterns_from_vectors(vectors, 0, MinerConfig())
            flat = sorted(i for c in result.clusters for i in c)
            assert flat == list(range(n))
            assert all(c for c in result.clusters)

    def test_distance_mode_expansion(self):
        rng = np.random.default_rng(41)
        vectors, _ = planted_vectors(rng, [5, 5, 5, 5], gap=12.0, spread=1.0)
        config = MinerConfig(max_clusters=2, expansion_metric="distance")
        result = mine_patterns_from_vectors(vectors, 0, config)
        assert len(result.clusters) <= 2


class TestExpansionRatio:
    def test_similarity_mode_by_hand(self):
        weights = np.array([[1.0, 0.9, 0.1],
                            [0.9, 1.0, 0.2],
                            [0.1, 0.2, 1.0]])
        # cut({0,1}) = 0.1 + 0.2; vol = 1 + .9 + .9 + 1
        assert expansion_ratio(weights, [0, 1]) == pytest.approx(0.3 / 3.8)

    def test_zero_volume_is_infinite(self):
        weights = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert expansion_ratio(weights, [0]) == float("inf")


class TestSeparationHelper:
    def test_identical_groups_infinite(self):
        tams = [TAM(np.array([3, 0]), np.array([0, 1]), 0.08)
                for _ in range(4)]
        assert tam_separation_ratio(tams, [0, 0, 1, 1]) == float("inf")
