"""Deterministic synthetic trace corpus with planted per-site patterns.

Real page-load datasets are not redistributable, so desk-scale runs and the
test suite use generated traffic instead.  Each site owns two or three burst
"patterns"; every instance samples one pattern and adds seeded jitter, so
ground-truth pattern labels are known and every byte of the corpus is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trace import INCOMING, OUTGOING, TAM, Trace, compute_tam


@dataclass(frozen=True)
class SynthConfig:
    n_sites: int = 20
    traces_per_site: int = 40
    min_patterns: int = 2
    max_patterns: int = 3
    duration_range: tuple[float, float] = (3.0, 8.0)
    bursts_per_pattern: tuple[int, int] = (3, 6)
    burst_count_range: tuple[int, int] = (20, 60)
    burst_spread: float = 0.15
    time_jitter: float = 0.04
    count_noise: float = 0.08
    seed: int = 1337


@dataclass
class SynthCorpus:
    config: SynthConfig
    traces: list[Trace]
    pattern_labels: dict[tuple[int, int], int] = field(default_factory=dict)

    def site_pattern_count(self, site_id: int) -> int:
        return len({p for (s, _), p in self.pattern_labels.items() if s == site_id})


def _site_skeletons(config: SynthConfig, site_id: int) -> list[list[tuple[float, int, int]]]:
    """Burst layouts for one site: per pattern, (center, direction, count)."""
    rng = np.random.default_rng([config.seed, 7919, site_id])
    n_patterns = int(rng.integers(config.min_patterns, config.max_patterns + 1))
    duration = float(rng.uniform(*config.duration_range))
    skeletons = []
    for _ in range(n_patterns):
        n_bursts = int(rng.integers(config.bursts_per_pattern[0],
                                    config.bursts_per_pattern[1] + 1))
        centers = np.sort(rng.uniform(0.3, duration, size=n_bursts))
        bursts = []
        for center in centers:
            direction = INCOMING if rng.random() < 0.7 else OUTGOING
            count = int(rng.integers(config.burst_count_range[0],
                                     config.burst_count_range[1] + 1))
            bursts.append((float(center), direction, count))
        skeletons.append(bursts)
    return skeletons


def _sample_trace(config: SynthConfig, site_id: int, instance_id: int,
                  skeleton: list[tuple[float, int, int]]) -> Trace:
    rng = np.random.default_rng([config.seed, 104729, site_id, instance_id])
    times = [0.0]
    dirs = [OUTGOING]
    # handshake trickle shared by all patterns of a site
    for k in range(int(rng.integers(2, 5))):
        times.append(float(rng.uniform(0.01, 0.15)))
        dirs.append(OUTGOING if k % 2 == 0 else INCOMING)
    for center, direction, count in skeleton:
        n = max(1, int(round(count * (1.0 + config.count_noise * rng.standard_normal()))))
        offset = config.time_jitter * rng.standard_normal()
        burst_times = center + offset + config.burst_spread * rng.standard_normal(n)
        for t in burst_times:
            times.append(max(0.0, float(t)))
            dirs.append(direction)
        # each incoming burst is answered by a couple of outgoing acks
        if direction == INCOMING:
            for t in rng.uniform(center - 0.05, center + 0.2, size=2):
                times.append(max(0.0, float(t)))
                dirs.append(OUTGOING)
    order = np.argsort(np.asarray(times), kind="stable")
    return Trace(np.asarray(times, dtype=np.float64)[order],
                 np.asarray(dirs, dtype=np.int8)[order],
                 site_id, instance_id)


def generate_corpus(config: SynthConfig) -> SynthCorpus:
    """Generate the full corpus; identical config means identical corpus."""
    traces = []
    labels: dict[tuple[int, int], int] = {}
    for site_id in range(config.n_sites):
        skeletons = _site_skeletons(config, site_id)
        for instance_id in range(config.traces_per_site):
            pattern_idx = instance_id % len(skeletons)
            trace = _sample_trace(config, site_id, instance_id,
                                  skeletons[pattern_idx])
            traces.append(trace)
            labels[(site_id, instance_id)] = pattern_idx
    return SynthCorpus(config, traces, labels)


def tam_separation_ratio(tams: list[TAM], labels: list[int]) -> float:
    """Planted-partition quality: min centroid gap over mean within-spread.

    Used by tests to certify that a fixture really is separable before
    asking a clusterer to recover it.
    """
    vectors = np.stack([t.flatten() for t in tams])
    labels_arr = np.asarray(labels)
    centroids = {}
    spreads = []
    for lab in np.unique(labels_arr):
        members = vectors[labels_arr == lab]
        centroid = members.mean(axis=0)
        centroids[lab] = centroid
        spreads.append(np.linalg.norm(members - centroid, axis=1).mean())
    keys = sorted(centroids)
    gaps = [np.linalg.norm(centroids[a] - centroids[b])
            for i, a in enumerate(keys) for b in keys[i + 1:]]
    if not gaps or not spreads:
        return float("inf")
    mean_spread = float(np.mean(spreads))
    if mean_spread == 0:
        return float("inf")
    return float(min(gaps)) / mean_spread


def corpus_tams(corpus: SynthCorpus, slot_width: float, n_slots: int,
                site_id: int) -> tuple[list[TAM], list[int]]:
    """TAMs and planted labels for one site, in instance order."""
    tams, labels = [], []
    for trace in corpus.traces:
        if trace.site_id != site_id:
            continue
        tams.append(compute_tam(trace, slot_width, n_slots))
        labels.append(corpus.pattern_labels[trace.key()])
    return tams, labels
