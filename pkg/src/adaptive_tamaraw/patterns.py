"""Intra-site pattern mining: affinity-threshold clustering of count matrices.

Traces of one site are clustered on their flattened 2xN count matrices with
a locally-scaled Gaussian similarity.  Clusters grow one at a time under an
affinity threshold derived from the data, get cleaned to a fixed point where
no trace prefers another cluster, and are finally merged down to a cluster
cap by repeatedly folding the smallest cluster into whichever neighbor keeps
the worst expansion ratio lowest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trace import DEFAULT_N_SLOTS, DEFAULT_SLOT_WIDTH, Trace, compute_tam

#: Local-scale neighbor rank; a trace's scale is the distance to this neighbor.
DEFAULT_K_NEIGHBORS = 7

#: Cap on intra-site clusters after post-processing.
DEFAULT_MAX_CLUSTERS = 6

#: Cleaning sweeps before we give up and keep the current partition.
CLEANING_SWEEP_CAP = 100


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric pairwise similarities in (0, 1] with unit diagonal."""

    values: np.ndarray
    local_scales: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)
        self.local_scales.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass
class MinerConfig:
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    max_clusters: int = DEFAULT_MAX_CLUSTERS
    slot_width: float = DEFAULT_SLOT_WIDTH
    n_slots: int = DEFAULT_N_SLOTS
    cleaning_sweep_cap: int = CLEANING_SWEEP_CAP
    # "similarity" scores cut/vol on A; "distance" uses raw Euclidean d
    expansion_metric: str = "similarity"


@dataclass
class PatternSet:
    """Partition of one site's trace indices into patterns."""

    site_id: int
    clusters: list[list[int]]
    threshold: float
    cleaning_converged: bool = True
    growth_converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    def labels(self) -> list[int]:
        n = sum(len(c) for c in self.clusters)
        out = [-1] * n
        for cluster_idx, members in enumerate(self.clusters):
            for m in members:
                out[m] = cluster_idx
        return out


def pairwise_distances(vectors: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix over row vectors."""
    sq = (vectors ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def similarity_matrix(vectors: np.ndarray, k_neighbors: int = DEFAULT_K_NEIGHBORS,
                      ) -> SimilarityMatrix:
    """Locally-scaled Gaussian similarity over row vectors.

    Each row's scale is its distance to its k-th nearest neighbor (self
    excluded); similarity is exp(-d^2 / (scale_x * scale_y)).  A zero scale
    (duplicate rows) is clamped to the smallest positive pairwise distance,
    or 1 if every distance is zero, so duplicates come out at similarity 1
    instead of NaN.
    """
    n = vectors.shape[0]
    if n < 2:
        raise ValueError("need at least 2 traces to build a similarity matrix")
    if not 1 <= k_neighbors < n:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}]")
    dist = pairwise_distances(vectors)
    scales = np.empty(n)
    for i in range(n):
        others = np.delete(dist[i], i)
        others.sort()
        scales[i] = others[k_neighbors - 1]
    positive = dist[dist > 0]
    fallback = float(positive.min()) if positive.size else 1.0
    scales[scales <= 0] = fallback
    sim = np.exp(-(dist ** 2) / np.outer(scales, scales))
    np.fill_diagonal(sim, 1.0)
    return SimilarityMatrix(sim, scales)


def dynamic_threshold(sim: SimilarityMatrix) -> float:
    """Mean similarity over unordered pairs (diagonal excluded)."""
    n = sim.size
    upper = sim.values[np.triu_indices(n, k=1)]
    return float(upper.mean())


def _affinity(sim: np.ndarray, member_rows: list[int], x: int) -> float:
    """Mean similarity of x to a cluster's members (self term included)."""
    return float(sim[x, member_rows].mean())


def _grow_clusters(sim: np.ndarray, threshold: float,
                   step_cap: int) -> tuple[list[list[int]], bool]:
    """Threshold-driven growth: admit best fits, evict lapsed members.

    One cluster is open at a time.  Each step admits the unassigned trace
    with the highest affinity if it clears the threshold; otherwise the
    lowest-affinity member below the threshold is evicted back to the pool;
    if neither applies the cluster closes.  Ties always resolve to the
    lowest trace index, so the procedure is deterministic.
    """
    n = sim.shape[0]
    unassigned = list(range(n))
    clusters: list[list[int]] = []
    converged = True
    steps = 0
    while unassigned:
        current: list[int] = [unassigned.pop(0)]  # a fresh seed always joins
        while True:
            steps += 1
            if steps > step_cap:
                converged = False
                break
            best_x, best_aff = -1, -math.inf
            for x in unassigned:
                aff = _affinity(sim, current, x)
                if aff > best_aff:
                    best_x, best_aff = x, aff
            if best_x >= 0 and best_aff >= threshold:
                unassigned.remove(best_x)
                current.append(best_x)
                continue
            worst_m, worst_aff = -1, math.inf
            for m in current:
                aff = _affinity(sim, current, m)
                if aff < threshold and aff < worst_aff:
                    worst_m, worst_aff = m, aff
            if worst_m >= 0 and len(current) > 1:
                current.remove(worst_m)
                unassigned.append(worst_m)
                unassigned.sort()
                continue
            break
        clusters.append(sorted(current))
    return clusters, converged


def _clean_clusters(sim: np.ndarray, clusters: list[list[int]],
                    sweep_cap: int) -> tuple[list[list[int]], bool]:
    """Reassign traces that strictly prefer another cluster, to a fixed point.

    At convergence every trace's affinity to its own cluster is >= its
    affinity to any other.  If the cap is hit the last partition is kept and
    flagged.
    """
    clusters = [list(c) for c in clusters]
    for _ in range(sweep_cap):
        moved = False
        for x in range(sim.shape[0]):
            home = next(i for i, c in enumerate(clusters) if x in c)
            own_aff = _affinity(sim, clusters[home], x)
            best_j, best_aff = -1, own_aff
            for j, c in enumerate(clusters):
                if j == home or not c:
                    continue
                aff = _affinity(sim, c, x)
                if aff > best_aff:
                    best_j, best_aff = j, aff
            if best_j >= 0:
                clusters[home].remove(x)
                clusters[best_j].append(x)
                clusters[best_j].sort()
                moved = True
        clusters = [c for c in clusters if c]
        if not moved:
            return [sorted(c) for c in clusters], True
    return [sorted(c) for c in clusters], False


def expansion_ratio(weights: np.ndarray, members: list[int]) -> float:
    """cut(C)/vol(C): boundary weight over internal weight (ordered pairs)."""
    idx = np.asarray(members)
    inside = weights[np.ix_(idx, idx)].sum()
    cut = weights[idx, :].sum() - inside
    if inside <= 0:
        return math.inf
    return float(cut / inside)


def _merge_down(weights: np.ndarray, clusters: list[list[int]],
                max_clusters: int) -> list[list[int]]:
    """Fold the smallest cluster into the neighbor that keeps the largest
    expansion ratio of the resulting partition as small as possible."""
    clusters = [sorted(c) for c in clusters]
    while len(clusters) > max_clusters:
        order = sorted(range(len(clusters)),
                       key=lambda i: (len(clusters[i]), clusters[i][0]))
        smallest = order[0]
        best_j, best_score = -1, math.inf
        for j in range(len(clusters)):
            if j == smallest:
                continue
            trial = [c for i, c in enumerate(clusters)
                     if i not in (smallest, j)]
            trial.append(sorted(clusters[smallest] + clusters[j]))
            score = max(expansion_ratio(weights, c) for c in trial)
            if score < best_score:
                best_j, best_score = j, score
        merged = sorted(clusters[smallest] + clusters[best_j])
        clusters = [c for i, c in enumerate(clusters)
                    if i not in (smallest, best_j)]
        clusters.append(merged)
        clusters.sort(key=lambda c: c[0])
    return clusters


def mine_patterns_from_vectors(vectors: np.ndarray, site_id: int,
                               config: MinerConfig) -> PatternSet:
    """Full pipeline on precomputed feature vectors (one row per trace)."""
    n = vectors.shape[0]
    if n < 2:
        raise ValueError("need at least 2 traces per site to mine patterns")
    k = min(config.k_neighbors, n - 1)
    sim = similarity_matrix(vectors, k)
    threshold = dynamic_threshold(sim)
    step_cap = max(100, 10 * n * n)
    grown, growth_ok = _grow_clusters(sim.values, threshold, step_cap)
    cleaned, cleaning_ok = _clean_clusters(sim.values, grown,
                                           config.cleaning_sweep_cap)
    if config.expansion_metric == "distance":
        weights = pairwise_distances(vectors)
    else:
        weights = sim.values
    merged = _merge_down(weights, cleaned, config.max_clusters)
    merged.sort(key=lambda c: c[0])
    return PatternSet(site_id, merged, threshold,
                      cleaning_converged=cleaning_ok,
                      growth_converged=growth_ok,
                      diagnostics={"n_traces": n, "k_neighbors": k})


def mine_patterns(site_traces: list[Trace], config: MinerConfig | None = None,
                  ) -> PatternSet:
    """Mine the recurring patterns of one site's traces."""
    config = config or MinerConfig()
    if len(site_traces) < 2:
        raise ValueError("need at least 2 traces per site to mine patterns")
    site_ids = {t.site_id for t in site_traces}
    if len(site_ids) != 1:
        raise ValueError("mine_patterns expects traces from a single site")
    vectors = np.stack([
        compute_tam(t, config.slot_width, config.n_slots).flatten()
        for t in site_traces])
    return mine_patterns_from_vectors(vectors, site_ids.pop(), config)
