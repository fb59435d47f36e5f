"""Global-to-local switching simulator with per-trace overhead accounting.

Every trace starts under conservative global padding.  At each checkpoint
the detector inspects the original (pre-padding) prefix — the defender sits
client-side and sees real traffic; on a switch, both directions continue
from the switch instant at the set's lighter rates, queued real cells carry
over FIFO, and the end-of-trace bucket padding applies to the combined
per-direction cell count at the post-switch rate.  With no decision the
output is bit-identical to the pure global schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .detector import DecisionState
from .errors import DataError
from .tamaraw import (DefendedTrace, SwitchEvent, TamarawParams, defend,
                      real_cell_indices, _merge_cells)
from .trace import INCOMING, OUTGOING, Trace

_EPS = 1e-12


class SwitchDetector(Protocol):
    def decide(self, times: np.ndarray, directions: np.ndarray,
               checkpoint: float, state: DecisionState) -> int | None: ...


class NeverDetector:
    """Abstains at every checkpoint; adaptive output equals pure global."""

    def decide(self, times, directions, checkpoint, state) -> None:
        return None


class OracleDetector:
    """Test utility: fires a fixed (set, time) decision per trace key.

    The key is (site, instance) of the undefended trace being simulated;
    the simulator passes it through DecisionState.  Decisions outside the
    mapping abstain.
    """

    def __init__(self, plan: Mapping[tuple[int, int], tuple[int, float]]):
        self.plan = dict(plan)

    def decide(self, times, directions, checkpoint, state) -> int | None:
        key = getattr(state, "trace_key", None)
        if key not in self.plan:
            return None
        set_id, fire_at = self.plan[key]
        if state.switched or checkpoint != fire_at:
            return None
        state.switched_set = set_id
        state.switch_time = checkpoint
        return set_id


@dataclass
class AdaptiveConfig:
    """Everything the simulator needs besides the detector itself."""

    global_params: TamarawParams
    local_params: dict[int, Optional[TamarawParams]]
    checkpoints: list[float]
    mode: str = "in-training"

    def __post_init__(self):
        for set_id, local in self.local_params.items():
            if local is not None and local.bucket_size != self.global_params.bucket_size:
                raise DataError(
                    f"set {set_id}: local bucket size {local.bucket_size} "
                    f"differs from global {self.global_params.bucket_size}")


@dataclass
class TraceEvents:
    trace_key: tuple[int, int]
    consults: list[tuple[float, Optional[int]]] = field(default_factory=list)
    switch: Optional[SwitchEvent] = None


def _pure_direction(trace: Trace, params: TamarawParams, direction: int):
    rho = params.rho(direction)
    reals = real_cell_indices(trace.direction_times(direction), rho)
    s_last = int(reals[-1]) if reals.size else 0
    L = params.bucket_size
    total = L * math.ceil(s_last / L) if s_last > 0 else L
    return reals, s_last, total, rho


def _switched_direction(trace: Trace, global_params: TamarawParams,
                        local_params: TamarawParams, direction: int,
                        tau: float):
    """Cells of one direction when the rate changes at time tau.

    Phase 1 is the pure global schedule truncated to ticks at or before
    tau; phase 2 continues at tau + j * rho_local.  The combined count is
    padded to a bucket multiple with trailing dummies at the local rate; a
    direction that ends up with zero cells still emits one full bucket.
    """
    reals_all = trace.direction_times(direction)
    pure_idx, s_last, total_pure, rho_g = _pure_direction(
        trace, global_params, direction)
    end_pure = total_pure * rho_g
    L = global_params.bucket_size
    if tau >= end_pure - _EPS:
        # this direction finished (padding included) before the switch
        ticks = np.arange(1, total_pure + 1, dtype=np.int64)
        dummy = np.ones(total_pure, dtype=bool)
        dummy[pure_idx - 1] = False
        last_real = s_last * rho_g
        return (ticks * rho_g, direction, dummy), last_real

    n1 = int(math.floor((tau + _EPS) / rho_g))
    in_phase1 = int(np.searchsorted(pure_idx, n1, side="right"))
    rho_l = local_params.rho(direction)
    remaining = reals_all[in_phase1:]
    if remaining.size:
        raw = np.ceil((remaining - tau) / rho_l - _EPS).astype(np.int64)
        raw = np.maximum(raw, 1)
        idx = np.arange(remaining.size, dtype=np.int64)
        phase2_idx = idx + np.maximum.accumulate(raw - idx)
        j_last = int(phase2_idx[-1])
    else:
        phase2_idx = np.zeros(0, dtype=np.int64)
        j_last = 0
    n2 = j_last + (-(n1 + j_last)) % L
    if n1 + n2 == 0:
        n2 = L
    times = np.concatenate([
        np.arange(1, n1 + 1, dtype=np.int64) * rho_g,
        tau + np.arange(1, n2 + 1, dtype=np.int64) * rho_l,
    ])
    dummy = np.ones(n1 + n2, dtype=bool)
    dummy[pure_idx[:in_phase1] - 1] = False
    dummy[n1 + phase2_idx - 1] = False
    if remaining.size:
        last_real = tau + j_last * rho_l
    elif in_phase1:
        last_real = int(pure_idx[in_phase1 - 1]) * rho_g
    else:
        last_real = 0.0
    return (times, direction, dummy), float(last_real)


def simulate_trace(trace: Trace, config: AdaptiveConfig,
                   detector: SwitchDetector,
                   ) -> tuple[DefendedTrace, TraceEvents]:
    """Defend one trace, consulting the detector at each live checkpoint."""
    if len(trace) == 0:
        raise ValueError("cannot defend an empty trace")
    events = TraceEvents(trace.key())
    end_global = max(
        _pure_direction(trace, config.global_params, d)[2]
        * config.global_params.rho(d)
        for d in (OUTGOING, INCOMING))
    state = DecisionState()
    state.trace_key = trace.key()  # for oracle detectors in tests
    switch: Optional[tuple[float, int, TamarawParams]] = None
    for cp in config.checkpoints:
        if cp >= end_global - _EPS:
            break
        keep = trace.times <= cp
        set_id = detector.decide(trace.times[keep], trace.directions[keep],
                                 cp, state)
        events.consults.append((cp, set_id))
        if set_id is None:
            continue
        if set_id not in config.local_params:
            raise DataError(f"detector chose unknown set {set_id}")
        local = config.local_params[set_id]
        if local is None:
            # the set has no parameters that beat the active global pair:
            # it never switches, but later sets stay testable for this trace
            state.excluded.add(set_id)
            state.switched_set = None
            state.switch_time = None
            continue
        switch = (cp, set_id, local)
        break
    if switch is None:
        return defend(trace, config.global_params), events
    tau, set_id, local = switch
    parts = []
    last_real = 0.0
    for direction in (OUTGOING, INCOMING):
        part, dir_last_real = _switched_direction(
            trace, config.global_params, local, direction, tau)
        parts.append(part)
        last_real = max(last_real, dir_last_real)
    event = SwitchEvent(tau, set_id)
    events.switch = event
    return _merge_cells(parts, last_real, event), events


@dataclass
class TraceRow:
    param_index: int
    site: int
    instance: int
    adaptive_bandwidth: float
    adaptive_time: float
    global_bandwidth: float
    global_time: float
    switched: bool
    set_id: Optional[int]
    switch_time: Optional[float]
    degenerate: bool = False

    @property
    def adaptive_total(self) -> float:
        return self.adaptive_bandwidth + self.adaptive_time

    @property
    def global_total(self) -> float:
        return self.global_bandwidth + self.global_time

    @property
    def saving(self) -> float:
        return self.global_total - self.adaptive_total


@dataclass
class SimulationReport:
    rows: list[TraceRow]
    events: list[TraceEvents]
    aggregates: dict = field(default_factory=dict)

    def recompute_aggregates(self) -> dict:
        per_param: dict[int, dict] = {}
        for pi in sorted({r.param_index for r in self.rows}):
            rows = [r for r in self.rows if r.param_index == pi]
            per_param[pi] = {
                "adaptive_bandwidth": float(np.mean([r.adaptive_bandwidth for r in rows])),
                "adaptive_time": float(np.mean([r.adaptive_time for r in rows])),
                "global_bandwidth": float(np.mean([r.global_bandwidth for r in rows])),
                "global_time": float(np.mean([r.global_time for r in rows])),
                "mean_saving": float(np.mean([r.saving for r in rows])),
                "switch_rate": float(np.mean([r.switched for r in rows])),
            }
        overall = {
            "adaptive_total": float(np.mean([r.adaptive_total for r in self.rows])),
            "global_total": float(np.mean([r.global_total for r in self.rows])),
            "mean_saving": float(np.mean([r.saving for r in self.rows])),
        }
        self.aggregates = {"per_param": per_param, "overall": overall}
        return self.aggregates


def _overhead_pair(trace: Trace, defended: DefendedTrace) -> tuple[float, float, bool]:
    n = len(trace)
    bandwidth = (len(defended) - n) / n
    t_n = trace.duration
    if t_n <= 0:
        return bandwidth, 0.0, True
    return bandwidth, max(0.0, (defended.last_real_time - t_n) / t_n), False


def evaluate(traces: Sequence[Trace], configs: Sequence[AdaptiveConfig],
             detector: SwitchDetector) -> SimulationReport:
    """Simulate every trace under every global configuration.

    Per-trace rows carry the adaptive and pure-global overheads side by
    side; aggregates hold per-parameter and overall means.
    """
    rows: list[TraceRow] = []
    all_events: list[TraceEvents] = []
    for pi, config in enumerate(configs):
        for trace in traces:
            defended, events = simulate_trace(trace, config, detector)
            pure = defend(trace, config.global_params)
            a_bw, a_t, degen = _overhead_pair(trace, defended)
            g_bw, g_t, _ = _overhead_pair(trace, pure)
            sw = defended.switch_event
            rows.append(TraceRow(
                pi, trace.site_id, trace.instance_id, a_bw, a_t, g_bw, g_t,
                sw is not None, sw.set_id if sw else None,
                sw.time if sw else None, degen))
            all_events.append(events)
    report = SimulationReport(rows, all_events)
    report.recompute_aggregates()
    return report


def time_budget_table(report: SimulationReport,
                      ceilings: Sequence[float]) -> list[dict]:
    """Minimum mean bandwidth under a mean-time ceiling, global vs adaptive."""
    per_param = report.aggregates["per_param"]
    out = []
    for ceiling in ceilings:
        row = {"ceiling": ceiling}
        for kind in ("global", "adaptive"):
            eligible = [v[f"{kind}_bandwidth"] for v in per_param.values()
                        if v[f"{kind}_time"] < ceiling]
            row[f"{kind}_min_bandwidth"] = min(eligible) if eligible else None
        out.append(row)
    return out


def bandwidth_auc(points: Sequence[tuple[float, float]]) -> float:
    """Mean bandwidth across the overhead curve: trapezoid area over the
    time-overhead range; a single point degenerates to its bandwidth."""
    pts = sorted(points)
    if len(pts) == 1:
        return pts[0][1]
    times = np.array([p[0] for p in pts])
    bws = np.array([p[1] for p in pts])
    span = times[-1] - times[0]
    if span <= 0:
        return float(bws.mean())
    return float(np.trapezoid(bws, times) / span)


def savings_histogram(rows: Sequence[TraceRow], n_bins: int = 40,
                      ) -> tuple[list[float], list[int]]:
    """Bin edges and counts of per-trace total-overhead savings."""
    savings = np.array([r.saving for r in rows])
    counts, edges = np.histogram(savings, bins=n_bins)
    return [float(e) for e in edges], [int(c) for c in counts]


def out_of_training_eval(traces: Sequence[Trace],
                         config: AdaptiveConfig, detector: SwitchDetector,
                         set_bound_means: Mapping[int, float],
                         fallback_bound: float,
                         ) -> tuple[SimulationReport, float]:
    """Simulate held-out-site traces and average the per-trace bound.

    A switched trace contributes its predicted set's grid-mean bound; an
    unswitched trace stays in the global-phase population and contributes
    the bound of that pooled population.
    """
    report = evaluate(traces, [config], detector)
    per_trace = [set_bound_means[r.set_id] if r.switched else fallback_bound
                 for r in report.rows]
    return report, float(np.mean(per_trace))
