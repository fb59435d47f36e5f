"""Anonymity-set generation over mined patterns.

Patterns (intra-site clusters) are greedily grouped into sets of at least k
patterns using a distance that is literally the attacker's expected success
rate after padding: bucket every trace of the tentative set by its padded
per-direction cell counts, let the attacker guess each bucket's majority
site, and average that accuracy over a parameter grid.  Minimizing it favors
shape-compatible patterns from distinct sites, which is where the k-anonymity
and diversity of the final sets come from.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .tamaraw import TamarawParams, defended_lengths, overheads_from_lengths
from .trace import Trace

BucketKey = tuple[int, int]


@dataclass(frozen=True)
class Pattern:
    """One intra-site pattern: a cluster of that site's training traces."""

    pattern_id: int
    site_id: int
    cluster_index: int
    trace_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.trace_ids)


@dataclass
class AnonymitySet:
    """A group of >= k patterns sharing local parameters and a switch time."""

    set_id: int
    patterns: list[Pattern] = field(default_factory=list)
    local_params: Optional[TamarawParams] = None
    safe_time: Optional[float] = None

    def trace_ids(self) -> list[int]:
        out: list[int] = []
        for p in self.patterns:
            out.extend(p.trace_ids)
        return out

    def sites(self) -> set[int]:
        return {p.site_id for p in self.patterns}

    def member_keys(self) -> list[tuple[int, int]]:
        return sorted((p.site_id, p.cluster_index) for p in self.patterns)


class LengthCache:
    """Padded-schedule summaries for every (trace, grid param) pair.

    Stores the last real-cell tick per direction, from which bucketed cell
    counts, last-real times and overheads all follow arithmetically.  Built
    once before clustering so the O(|patterns|^2 * |grid|) greedy loop only
    ever counts integers.
    """

    def __init__(self, traces: Sequence[Trace], grid: Sequence[TamarawParams]):
        from .tamaraw import last_tick_indices

        self.grid = list(grid)
        self.n_traces = len(traces)
        self.site_ids = np.array([t.site_id for t in traces], dtype=np.int64)
        self.n_packets = np.array([len(t) for t in traces], dtype=np.int64)
        self.t_n = np.array([t.duration for t in traces], dtype=np.float64)
        self.s_last = np.zeros((len(traces), len(self.grid), 2), dtype=np.int64)
        for ti, trace in enumerate(traces):
            for pi, params in enumerate(self.grid):
                self.s_last[ti, pi] = last_tick_indices(trace, params)

    def bucket_key(self, trace_id: int, param_idx: int) -> BucketKey:
        L = self.grid[param_idx].bucket_size
        s_out, s_in = self.s_last[trace_id, param_idx]
        n_out = L * -(-int(s_out) // L) if s_out > 0 else L
        n_in = L * -(-int(s_in) // L) if s_in > 0 else L
        return (n_out, n_in)

    def overheads(self, trace_id: int, param_idx: int):
        params = self.grid[param_idx]
        n_out, n_in = self.bucket_key(trace_id, param_idx)
        s_out, s_in = self.s_last[trace_id, param_idx]
        last_real = max(s_out * params.rho_out, s_in * params.rho_in)
        return overheads_from_lengths(
            int(self.n_packets[trace_id]), n_out + n_in,
            float(self.t_n[trace_id]), float(last_real), params)

    def overhead_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """(bandwidth, time) overheads as (n_traces, n_params) arrays.

        Degenerate traces (last real packet at t=0) report time overhead 0,
        same as the scalar path.
        """
        buckets = np.array([[p.bucket_size for p in self.grid]], dtype=np.int64)
        s = self.s_last  # (n_traces, n_params, 2)
        padded = -(-s // buckets[..., None]) * buckets[..., None]
        padded = np.where(s > 0, padded, buckets[..., None])
        totals = padded.sum(axis=2)
        bandwidth = (totals - self.n_packets[:, None]) / self.n_packets[:, None]
        rho_out = np.array([p.rho_out for p in self.grid])
        rho_in = np.array([p.rho_in for p in self.grid])
        last_real = np.maximum(s[:, :, 0] * rho_out[None, :],
                               s[:, :, 1] * rho_in[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            time = (last_real - self.t_n[:, None]) / self.t_n[:, None]
        time = np.where(self.t_n[:, None] > 0, np.maximum(time, 0.0), 0.0)
        return bandwidth, time


def attacker_accuracy(traces: Sequence[Trace], params: TamarawParams) -> float:
    """Expected success of the optimal bucket-majority attacker.

    Traces are bucketed by their padded per-direction cell counts; within a
    bucket all defended sequences are identical, so the best any classifier
    can do is guess the bucket's most frequent site.
    """
    if not traces:
        raise ValueError("attacker accuracy needs at least one trace")
    buckets: dict[BucketKey, Counter] = {}
    for t in traces:
        key = defended_lengths(t, params)
        buckets.setdefault(key, Counter())[t.site_id] += 1
    majority_total = sum(max(c.values()) for c in buckets.values())
    return majority_total / len(traces)


class _SetState:
    """Incremental per-parameter bucket/site counts for one growing set."""

    def __init__(self, cache: LengthCache):
        self.cache = cache
        self.n_params = len(cache.grid)
        self.n_traces = 0
        # per param: bucket key -> {site -> count}, plus the majority numerator
        self.buckets: list[dict[BucketKey, dict[int, int]]] = [
            {} for _ in range(self.n_params)]
        self.majority: list[int] = [0] * self.n_params

    def add_pattern(self, pattern: Pattern) -> None:
        for tid in pattern.trace_ids:
            if int(self.cache.site_ids[tid]) != pattern.site_id:
                raise ValueError(
                    f"pattern {pattern.pattern_id} labeled site "
                    f"{pattern.site_id} contains trace {tid} of site "
                    f"{int(self.cache.site_ids[tid])}; patterns are intra-site")
        for pi in range(self.n_params):
            table = self.buckets[pi]
            for tid in pattern.trace_ids:
                key = self.cache.bucket_key(tid, pi)
                sites = table.setdefault(key, {})
                old_max = max(sites.values(), default=0)
                sites[pattern.site_id] = sites.get(pattern.site_id, 0) + 1
                new_max = max(old_max, sites[pattern.site_id])
                self.majority[pi] += new_max - old_max
        self.n_traces += len(pattern.trace_ids)

    def distance_if_added(self, pattern: Pattern,
                          counts: list[dict[BucketKey, int]]) -> float:
        """Mean attacker accuracy over the grid after merging ``pattern``."""
        total_traces = self.n_traces + len(pattern.trace_ids)
        acc = 0.0
        for pi in range(self.n_params):
            table = self.buckets[pi]
            numerator = self.majority[pi]
            for key, add in counts[pi].items():
                sites = table.get(key)
                if sites is None:
                    numerator += add
                    continue
                old_max = max(sites.values())
                new_count = sites.get(pattern.site_id, 0) + add
                numerator += max(old_max, new_count) - old_max
            acc += numerator / total_traces
        return acc / self.n_params

    def mean_accuracy(self) -> float:
        if self.n_traces == 0:
            raise ValueError("empty set")
        return sum(m / self.n_traces for m in self.majority) / self.n_params


def _pattern_bucket_counts(pattern: Pattern, cache: LengthCache,
                           ) -> list[dict[BucketKey, int]]:
    for tid in pattern.trace_ids:
        if int(cache.site_ids[tid]) != pattern.site_id:
            raise ValueError(
                f"pattern {pattern.pattern_id} labeled site "
                f"{pattern.site_id} contains trace {tid} of site "
                f"{int(cache.site_ids[tid])}; patterns are intra-site")
    out: list[dict[BucketKey, int]] = []
    for pi in range(len(cache.grid)):
        counts: dict[BucketKey, int] = {}
        for tid in pattern.trace_ids:
            key = cache.bucket_key(tid, pi)
            counts[key] = counts.get(key, 0) + 1
        out.append(counts)
    return out


def distance(aset: AnonymitySet, candidate: Pattern,
             grid: Sequence[TamarawParams], traces: Sequence[Trace]) -> float:
    """Grid-averaged attacker accuracy of the set merged with a candidate.

    Reference implementation on raw traces; the greedy loop uses the
    incremental cached equivalent, which tests hold to this one.
    """
    if not grid:
        raise ValueError("parameter grid is empty")
    member_ids = aset.trace_ids() + list(candidate.trace_ids)
    members = [traces[i] for i in member_ids]
    return float(np.mean([attacker_accuracy(members, p) for p in grid]))


def build_sets(patterns: Sequence[Pattern], k: int,
               grid: Sequence[TamarawParams], cache: LengthCache,
               ) -> list[AnonymitySet]:
    """Greedy k-anonymous grouping of patterns.

    Seeds the first set with the lowest-id pattern, grows each set to k
    members by repeatedly taking the candidate with the lowest attacker
    accuracy, seeds each subsequent set with the pattern farthest (largest
    summed distance) from every closed set, and finally folds each leftover
    pattern into its nearest set.  Produces exactly floor(n/k) sets, each
    with at least k patterns.  All ties break toward the lowest pattern id.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(patterns) < k:
        raise ValueError(f"need at least k={k} patterns, got {len(patterns)}")
    patterns = sorted(patterns, key=lambda p: p.pattern_id)
    counts = {p.pattern_id: _pattern_bucket_counts(p, cache) for p in patterns}
    unassigned: dict[int, Pattern] = {p.pattern_id: p for p in patterns}
    n_sets = len(patterns) // k

    states: list[_SetState] = []
    sets: list[AnonymitySet] = []
    # distance of every pattern to each closed set, summed as sets close
    farness: dict[int, float] = {pid: 0.0 for pid in unassigned}

    seed = patterns[0]
    for set_idx in range(n_sets):
        if set_idx > 0:
            seed_id = max(unassigned,
                          key=lambda pid: (farness[pid], -pid))
            seed = unassigned[seed_id]
        state = _SetState(cache)
        aset = AnonymitySet(set_id=set_idx)
        state.add_pattern(seed)
        aset.patterns.append(seed)
        del unassigned[seed.pattern_id]
        while len(aset.patterns) < k and unassigned:
            best_id, best_d = -1, float("inf")
            for pid in sorted(unassigned):
                d = state.distance_if_added(unassigned[pid], counts[pid])
                if d < best_d:
                    best_id, best_d = pid, d
            chosen = unassigned.pop(best_id)
            state.add_pattern(chosen)
            aset.patterns.append(chosen)
        # set is closed: fold its distance into every leftover's farness
        for pid in unassigned:
            farness[pid] += state.distance_if_added(unassigned[pid],
                                                    counts[pid])
        states.append(state)
        sets.append(aset)

    for pid in sorted(unassigned):
        pattern = unassigned[pid]
        best_j, best_d = -1, float("inf")
        for j, state in enumerate(states):
            d = state.distance_if_added(pattern, counts[pid])
            if d < best_d:
                best_j, best_d = j, d
        states[best_j].add_pattern(pattern)
        sets[best_j].patterns.append(pattern)
    return sets


def set_mean_accuracy(aset: AnonymitySet, cache: LengthCache) -> float:
    """Mean over the cache's grid of the set's bucket-majority accuracy."""
    state = _SetState(cache)
    for p in aset.patterns:
        state.add_pattern(p)
    return state.mean_accuracy()


def select_local_params(aset: AnonymitySet, global_params: TamarawParams,
                        grid: Sequence[TamarawParams], cache: LengthCache,
                        traces: Sequence[Trace] | None = None,
                        ) -> Optional[TamarawParams]:
    """Pick grid parameters that strictly dominate the global pair.

    A candidate qualifies only if both its mean bandwidth and mean time
    overhead over the set's training traces are strictly below the global
    means; among qualifiers the one with the smallest summed overhead wins.
    Returns None when nothing qualifies, in which case the set never
    switches.
    """
    trace_ids = aset.trace_ids()
    if not trace_ids:
        raise ValueError("set has no training traces")

    def mean_overheads(params: TamarawParams) -> tuple[float, float]:
        try:
            pi = cache.grid.index(params)
        except ValueError:
            pi = None
        if pi is None and traces is None:
            raise ValueError("parameters outside the cached grid and no "
                             "traces given to recompute from")
        bw, tm = 0.0, 0.0
        for tid in trace_ids:
            if pi is not None:
                point = cache.overheads(tid, pi)
            else:
                from .tamaraw import defend, overheads
                trace = traces[tid]
                point = overheads(trace, defend(trace, params), params)
            bw += point.bandwidth
            tm += point.time
        return bw / len(trace_ids), tm / len(trace_ids)

    global_bw, global_tm = mean_overheads(global_params)
    best: Optional[TamarawParams] = None
    best_sum = float("inf")
    for params in grid:
        bw, tm = mean_overheads(params)
        if bw < global_bw and tm < global_tm and bw + tm < best_sum:
            best, best_sum = params, bw + tm
    return best


def purity(sets: Sequence[AnonymitySet], traces: Sequence[Trace],
           ) -> tuple[list[float], float]:
    """Per-set share (in percent) of its most frequent site, plus the mean.

    The balanced-optimum reference for k sites is 100/k percent.
    """
    if not sets:
        raise ValueError("no sets")
    values = []
    for aset in sets:
        counter = Counter(traces[tid].site_id for tid in aset.trace_ids())
        total = sum(counter.values())
        values.append(100.0 * max(counter.values()) / total)
    return values, float(np.mean(values))


def diversity_report(sets: Sequence[AnonymitySet]) -> list[int]:
    """Observed site multiplicity (l-diversity) per set; not enforced."""
    return [len(aset.sites()) for aset in sets]


def exhaustive_min_mean_accuracy(patterns: Sequence[Pattern], k: int,
                                 grid: Sequence[TamarawParams],
                                 cache: LengthCache) -> float:
    """Brute-force minimum, over all valid partitions, of the mean per-set
    grid-averaged attacker accuracy.  Exponential; only for tiny inputs."""
    patterns = sorted(patterns, key=lambda p: p.pattern_id)
    n_sets = len(patterns) // k
    best = float("inf")

    def mean_acc(groups: list[list[Pattern]]) -> float:
        accs = []
        for group in groups:
            state = _SetState(cache)
            for p in group:
                state.add_pattern(p)
            accs.append(state.mean_accuracy())
        return float(np.mean(accs))

    def partitions(items: list[Pattern], bins: int):
        if bins == 1:
            yield [items]
            return
        first = items[0]
        rest = items[1:]
        # first element anchors a group to avoid counting permutations
        for size in range(k - 1, len(rest) - (bins - 1) * k + 1):
            for combo in itertools.combinations(range(len(rest)), size):
                group = [first] + [rest[i] for i in combo]
                remaining = [rest[i] for i in range(len(rest))
                             if i not in combo]
                for tail in partitions(remaining, bins - 1):
                    yield [group] + tail

    for grouping in partitions(list(patterns), n_sets):
        if all(len(g) >= k for g in grouping):
            best = min(best, mean_acc(grouping))
    return best


# -- supermatrix diagnostic --------------------------------------------------
# Comparison mode only: grouping element-wise-max count matrices by greedy
# Euclidean distance, at website or pattern granularity, and measuring the
# padding cost of forcing every trace up to its group's supermatrix.  Not a
# defense path; it exists to show why pattern-level grouping pads less.

def supermatrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if not len(vectors):
        raise ValueError("cannot build a supermatrix from nothing")
    return np.maximum.reduce([np.asarray(v, dtype=float) for v in vectors])


def greedy_shape_sets(item_vectors: Sequence[np.ndarray],
                      k: int) -> list[list[int]]:
    """Greedy k-grouping of item supermatrices by Euclidean closeness.

    Seeds each group with the lowest unassigned index, repeatedly absorbs
    the item closest to the group's running supermatrix until it holds k,
    then starts the next; leftovers join their nearest group.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    unassigned = list(range(len(item_vectors)))
    groups: list[list[int]] = []
    supers: list[np.ndarray] = []
    while len(unassigned) >= k:
        seed = unassigned.pop(0)
        members = [seed]
        current = np.asarray(item_vectors[seed], dtype=float).copy()
        while len(members) < k and unassigned:
            gaps = [np.linalg.norm(item_vectors[i] - current)
                    for i in unassigned]
            chosen = unassigned.pop(int(np.argmin(gaps)))
            members.append(chosen)
            current = np.maximum(current, item_vectors[chosen])
        groups.append(members)
        supers.append(current)
    for i in unassigned:
        gaps = [np.linalg.norm(item_vectors[i] - s) for s in supers]
        target = int(np.argmin(gaps))
        groups[target].append(i)
        supers[target] = np.maximum(supers[target], item_vectors[i])
    return groups


def supermatrix_overhead(groups: Sequence[Sequence[int]],
                         item_vectors: Sequence[np.ndarray],
                         traces_per_item: Sequence[Sequence[np.ndarray]],
                         ) -> float:
    """Mean per-trace padding ratio when every trace inflates to its
    group's supermatrix."""
    ratios = []
    for members in groups:
        top = supermatrix([item_vectors[i] for i in members])
        budget = float(top.sum())
        for i in members:
            for vec in traces_per_item[i]:
                own = float(np.asarray(vec).sum())
                if own > 0:
                    ratios.append((budget - own) / own)
    return float(np.mean(ratios))


def website_vs_pattern_diagnostic(tams_by_site: Mapping[int, Sequence[np.ndarray]],
                                  pattern_of: Mapping[int, Sequence[int]],
                                  k: int) -> dict[str, float]:
    """Padding cost of website-level vs pattern-level supermatrix grouping."""
    site_items, site_traces = [], []
    pattern_items, pattern_traces = [], []
    for site in sorted(tams_by_site):
        vectors = [np.asarray(v, dtype=float) for v in tams_by_site[site]]
        site_items.append(supermatrix(vectors))
        site_traces.append(vectors)
        by_pattern: dict[int, list[np.ndarray]] = {}
        for vec, pat in zip(vectors, pattern_of[site]):
            by_pattern.setdefault(pat, []).append(vec)
        for pat in sorted(by_pattern):
            pattern_items.append(supermatrix(by_pattern[pat]))
            pattern_traces.append(by_pattern[pat])
    website = supermatrix_overhead(greedy_shape_sets(site_items, k),
                                   site_items, site_traces)
    pattern = supermatrix_overhead(greedy_shape_sets(pattern_items, k),
                                   pattern_items, pattern_traces)
    return {"website": website, "pattern": pattern}


def patterns_from_mining(pattern_sets, trace_index: dict[tuple[int, int], int],
                         site_traces: dict[int, list[Trace]]) -> list[Pattern]:
    """Flatten per-site mining output into globally-numbered patterns."""
    patterns: list[Pattern] = []
    next_id = 0
    for pset in sorted(pattern_sets, key=lambda p: p.site_id):
        traces = site_traces[pset.site_id]
        for cluster_index, members in enumerate(pset.clusters):
            trace_ids = tuple(trace_index[traces[m].key()] for m in members)
            patterns.append(Pattern(next_id, pset.site_id, cluster_index,
                                    trace_ids))
            next_id += 1
    return patterns
