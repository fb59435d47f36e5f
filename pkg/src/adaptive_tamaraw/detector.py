"""Two-stage early classifier with safe switch times.

Stage A names the most likely site from a live prefix (nearest per-site
count-matrix centroid by default; any external predictor can be plugged in
over a line-delimited JSON subprocess protocol).  Stage B runs that site's
leaf-fingerprint forest for the checkpoint to name the intra-site pattern.
The (site, pattern) pair maps to a unique anonymity set.

Each set S gets one safe timestamp: the earliest checkpoint where the
pipeline routes at least a fraction alpha of S's validation traces to S,
relative to its full-trace accuracy.  A set is tested exactly once, at its
safe time; a trace rejected there never reconsiders that set, so every
trace that joins S switches at the same instant and the switch time leaks
nothing beyond set identity.

External predictor protocol (one JSON object per line on stdio):

    request:  {"op": "predict", "checkpoint": 1.5,
               "packets": [[0.0, 1], [0.12, -1], ...]}
    response: {"site_id": 3, "confidence": 0.87}

A ``{"op": "shutdown"}`` request (or closing stdin) ends the helper.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import DataError
from .kfp import ForestConfig, LeafFingerprintClassifier, extract_features
from .trace import DEFAULT_N_SLOTS, DEFAULT_SLOT_WIDTH, Trace, compute_tam

#: Sentinel horizon meaning "the complete trace".
FULL_TRACE = math.inf

DEFAULT_ALPHA = 0.9


def default_checkpoints(step: float = 0.5, horizon: float = 20.0) -> list[float]:
    """Multiples of ``step`` up to ``horizon`` inclusive."""
    n = int(round(horizon / step))
    return [round(step * (i + 1), 9) for i in range(n)]


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = DEFAULT_ALPHA
    checkpoints: tuple[float, ...] = tuple(default_checkpoints())
    slot_width: float = DEFAULT_SLOT_WIDTH
    n_slots: int = DEFAULT_N_SLOTS
    forest: ForestConfig = ForestConfig()

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        cps = tuple(self.checkpoints)
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError("checkpoints must be strictly ascending")


class SitePredictor(Protocol):
    def predict(self, times: np.ndarray, directions: np.ndarray,
                checkpoint: float) -> int: ...


class CentroidSitePredictor:
    """Per-site mean count-matrix vectors, one bank per checkpoint."""

    def __init__(self, slot_width: float, n_slots: int):
        self.slot_width = slot_width
        self.n_slots = n_slots
        self.site_ids: list[int] = []
        # checkpoint value -> (n_sites, 2*n_slots) centroid matrix
        self.banks: dict[float, np.ndarray] = {}

    def _vector(self, times: np.ndarray, directions: np.ndarray) -> np.ndarray:
        if times.size == 0:
            return np.zeros(2 * self.n_slots)
        trace = Trace(times, directions)
        return compute_tam(trace, self.slot_width, self.n_slots).flatten()

    def fit(self, traces_by_site: Mapping[int, Sequence[Trace]],
            checkpoints: Sequence[float]) -> "CentroidSitePredictor":
        self.site_ids = sorted(traces_by_site)
        for cp in list(checkpoints) + [FULL_TRACE]:
            rows = []
            for site in self.site_ids:
                vectors = []
                for trace in traces_by_site[site]:
                    keep = trace.times <= cp
                    vectors.append(self._vector(trace.times[keep],
                                                trace.directions[keep]))
                rows.append(np.mean(vectors, axis=0))
            self.banks[cp] = np.stack(rows)
        return self

    def predict(self, times: np.ndarray, directions: np.ndarray,
                checkpoint: float) -> int:
        bank = self.banks.get(checkpoint)
        if bank is None:
            raise KeyError(f"no centroid bank for checkpoint {checkpoint}")
        vec = self._vector(times, directions)
        gaps = np.linalg.norm(bank - vec, axis=1)
        return self.site_ids[int(np.argmin(gaps))]  # argmin: lowest site wins ties


class ExternalSitePredictor:
    """Site predictor running as a child process speaking JSON lines."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        return self._proc

    def predict(self, times: np.ndarray, directions: np.ndarray,
                checkpoint: float) -> int:
        proc = self._ensure()
        request = {"op": "predict",
                   "checkpoint": None if math.isinf(checkpoint) else checkpoint,
                   "packets": [[float(t), int(d)]
                               for t, d in zip(times, directions)]}
        proc.stdin.write(json.dumps(request) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise DataError("external site predictor closed its stdout")
        response = json.loads(line)
        return int(response["site_id"])

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.write(json.dumps({"op": "shutdown"}) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, ValueError):
                pass
            self._proc.wait(timeout=5)
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class PatternBank:
    """Stage-B models for one site, keyed by checkpoint value.

    ``fallback`` is the largest pattern's index when the site lacked enough
    per-pattern data to train; the flag is surfaced in reports.
    """

    site_id: int
    models: dict[float, LeafFingerprintClassifier] = field(default_factory=dict)
    fallback: int | None = None

    def predict(self, features: np.ndarray, checkpoint: float) -> int | None:
        if self.fallback is not None:
            return self.fallback
        model = self.models.get(checkpoint)
        if model is None:
            return None
        return int(model.predict_one(features))


def train_pattern_predictor(traces: Sequence[Trace],
                            pattern_labels: Sequence[int], checkpoint: float,
                            forest: ForestConfig, seed: int,
                            ) -> LeafFingerprintClassifier:
    """Fit one per-site, per-checkpoint pattern model on prefix features."""
    counts = {}
    for lab in pattern_labels:
        counts[lab] = counts.get(lab, 0) + 1
    eligible = [lab for lab, c in counts.items() if c >= 2]
    if len(eligible) < 2:
        raise ValueError("need at least 2 patterns with 2 traces each")
    features = []
    for trace in traces:
        keep = trace.times <= checkpoint
        features.append(extract_features(trace.times[keep],
                                         trace.directions[keep]))
    return LeafFingerprintClassifier(forest, seed).fit(
        np.stack(features), np.asarray(pattern_labels))


@dataclass
class SafeTimeTable:
    """Per-set safe timestamps plus the validation evidence behind them."""

    checkpoints: list[float]
    alpha: float
    safe_times: dict[int, float]
    full_accuracy: dict[int, float]
    accuracy_curves: dict[int, list[float]]
    flags: dict[int, str] = field(default_factory=dict)

    def finite_times(self) -> dict[int, float]:
        return {s: t for s, t in self.safe_times.items() if math.isfinite(t)}


@dataclass
class DecisionState:
    """Per-trace switching state: which sets are burned, whether we switched."""

    excluded: set[int] = field(default_factory=set)
    switched_set: int | None = None
    switch_time: float | None = None
    trace_key: tuple[int, int] | None = None

    @property
    def switched(self) -> bool:
        return self.switched_set is not None


class TwoStageDetector:
    """Site predictor + per-site pattern banks + the set map and safe times."""

    def __init__(self, site_predictor: SitePredictor,
                 banks: Mapping[int, PatternBank],
                 set_map: Mapping[tuple[int, int], int],
                 config: DetectorConfig):
        self.site_predictor = site_predictor
        self.banks = dict(banks)
        self.set_map = dict(set_map)
        self.config = config
        self.table: SafeTimeTable | None = None

    # -- raw pipeline ------------------------------------------------------

    def route(self, times: np.ndarray, directions: np.ndarray,
              checkpoint: float) -> int | None:
        """Prefix -> predicted set id, with no safe-time gating."""
        site = self.site_predictor.predict(times, directions, checkpoint)
        bank = self.banks.get(site)
        if bank is None:
            return None
        pattern = bank.predict(extract_features(times, directions), checkpoint)
        if pattern is None:
            return None
        return self.set_map.get((site, pattern))

    # -- gated decision ----------------------------------------------------

    def decide(self, times: np.ndarray, directions: np.ndarray,
               checkpoint: float, state: DecisionState) -> int | None:
        """Single-shot switching rule at one checkpoint.

        Returns the set to switch to, or None.  Every set whose safe time
        equals this checkpoint and that was not chosen is excluded from all
        later decisions for this trace; a trace can switch at most once.
        """
        if self.table is None:
            raise RuntimeError("safe-time table not computed")
        if state.switched:
            return None
        due = [s for s, t in self.table.safe_times.items() if t == checkpoint]
        predicted = self.route(times, directions, checkpoint)
        chosen: int | None = None
        if (predicted is not None and predicted not in state.excluded
                and self.table.safe_times.get(predicted) == checkpoint):
            chosen = predicted
        for set_id in due:
            if set_id != chosen:
                state.excluded.add(set_id)
        if chosen is not None:
            state.switched_set = chosen
            state.switch_time = checkpoint
        return chosen

    # -- safe-time fitting ---------------------------------------------------

    def compute_safe_times(self, validation: Sequence[Trace],
                           true_sets: Sequence[int]) -> SafeTimeTable:
        """Earliest checkpoint where each set reaches alpha of its full-trace
        routing accuracy.

        Sets with no validation traces, or whose full-trace accuracy is zero,
        never switch (safe time = inf) and are flagged.
        """
        config = self.config
        checkpoints = list(config.checkpoints)
        per_set: dict[int, list[int]] = {}
        for idx, set_id in enumerate(true_sets):
            per_set.setdefault(set_id, []).append(idx)
        all_sets = sorted(set(self.set_map.values()))

        routed: dict[tuple[int, float], int | None] = {}
        for idx, trace in enumerate(validation):
            for cp in checkpoints + [FULL_TRACE]:
                keep = trace.times <= cp
                routed[(idx, cp)] = self.route(trace.times[keep],
                                               trace.directions[keep], cp)

        safe_times: dict[int, float] = {}
        full_acc: dict[int, float] = {}
        curves: dict[int, list[float]] = {}
        flags: dict[int, str] = {}
        for set_id in all_sets:
            members = per_set.get(set_id, [])
            if not members:
                safe_times[set_id] = math.inf
                full_acc[set_id] = 0.0
                curves[set_id] = [0.0] * len(checkpoints)
                flags[set_id] = "no-validation-traces"
                continue
            a_full = sum(routed[(i, FULL_TRACE)] == set_id
                         for i in members) / len(members)
            curve = [sum(routed[(i, cp)] == set_id for i in members)
                     / len(members) for cp in checkpoints]
            full_acc[set_id] = a_full
            curves[set_id] = curve
            if a_full <= 0.0:
                safe_times[set_id] = math.inf
                flags[set_id] = "validator-blind"
                continue
            target = self.config.alpha * a_full
            tau = next((cp for cp, acc in zip(checkpoints, curve)
                        if acc >= target - 1e-12), math.inf)
            safe_times[set_id] = tau
            if math.isinf(tau):
                flags[set_id] = "never-qualifies"
        self.table = SafeTimeTable(checkpoints, config.alpha, safe_times,
                                   full_acc, curves, flags)
        return self.table

    def retained_checkpoints(self) -> dict[int, list[float]]:
        """Checkpoints whose models each site keeps: the finite safe times of
        sets containing one of its patterns.  Pruning to these never changes
        behavior, because a switch needs the checkpoint to equal the
        predicted set's safe time anyway."""
        if self.table is None:
            raise RuntimeError("safe-time table not computed")
        finite = self.table.finite_times()
        per_site: dict[int, set[float]] = {site: set() for site in self.banks}
        for (site, _pattern), set_id in self.set_map.items():
            tau = finite.get(set_id)
            if tau is not None and site in per_site:
                per_site[site].add(tau)
        return {site: sorted(times) for site, times in per_site.items()}

    def prune(self) -> None:
        """Drop pattern models outside each site's retained checkpoints."""
        for site, keep in self.retained_checkpoints().items():
            bank = self.banks[site]
            bank.models = {cp: m for cp, m in bank.models.items() if cp in keep}


def assign_to_patterns(traces: Sequence[Trace], pattern_sets,
                       train_by_site: Mapping[int, Sequence[Trace]],
                       slot_width: float, n_slots: int) -> list[int]:
    """Ground-truth pattern index for traces outside the mining split.

    Patterns are defined on training traces only, so validation/test traces
    take the nearest pattern centroid (count-matrix space) of their own
    site; ties go to the lower pattern index.
    """
    centroids: dict[int, np.ndarray] = {}
    for pset in pattern_sets:
        site_traces = train_by_site[pset.site_id]
        rows = []
        for members in pset.clusters:
            vecs = [compute_tam(site_traces[m], slot_width, n_slots).flatten()
                    for m in members]
            rows.append(np.mean(vecs, axis=0))
        centroids[pset.site_id] = np.stack(rows)
    labels = []
    for trace in traces:
        bank = centroids[trace.site_id]
        vec = compute_tam(trace, slot_width, n_slots).flatten()
        labels.append(int(np.argmin(np.linalg.norm(bank - vec, axis=1))))
    return labels


def train_detector(train_by_site: Mapping[int, Sequence[Trace]],
                   pattern_labels_by_site: Mapping[int, Sequence[int]],
                   set_map: Mapping[tuple[int, int], int],
                   config: DetectorConfig, seed: int) -> TwoStageDetector:
    """Fit Stage A and every per-(site, checkpoint) Stage-B model.

    Sites without two viable patterns fall back to their largest pattern
    and are flagged on their bank.
    """
    site_predictor = CentroidSitePredictor(config.slot_width, config.n_slots)
    site_predictor.fit(train_by_site, config.checkpoints)
    banks: dict[int, PatternBank] = {}
    for site in sorted(train_by_site):
        traces = list(train_by_site[site])
        labels = list(pattern_labels_by_site[site])
        counts: dict[int, int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        viable = [lab for lab, c in counts.items() if c >= 2]
        bank = PatternBank(site)
        if len(viable) < 2:
            bank.fallback = max(counts, key=lambda lab: (counts[lab], -lab))
        else:
            for cp_index, cp in enumerate(list(config.checkpoints)
                                          + [FULL_TRACE]):
                model_seed = (seed * 1_000_003 + site * 1_009 + cp_index) % (2**31)
                bank.models[cp] = train_pattern_predictor(
                    traces, labels, cp, config.forest, model_seed)
        banks[site] = bank
    return TwoStageDetector(site_predictor, banks, set_map, config)
