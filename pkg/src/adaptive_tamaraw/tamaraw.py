"""Constant-rate padding engine: schedules, overheads, grids, Pareto filter.

The defense emits fixed-size cells per direction at a constant interval
(rho_out upstream, rho_in downstream), carries real cells FIFO with one real
cell per tick, and pads each direction's count up to the next multiple of
the bucket size L.  Two traces with equal per-direction bucketed counts
therefore produce identical observable sequences, which is what the security
bound is built on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .trace import INCOMING, OUTGOING, Trace

#: Slack for "did this real cell land on/before this tick" comparisons.
_TICK_EPS = 1e-12


@dataclass(frozen=True)
class TamarawParams:
    """Padding schedule: seconds per cell in each direction plus bucket size."""

    rho_out: float
    rho_in: float
    bucket_size: int

    def __post_init__(self):
        if self.rho_out <= 0 or self.rho_in <= 0:
            raise ValueError("cell intervals must be positive")
        if self.bucket_size < 1:
            raise ValueError("bucket size must be >= 1")

    def rho(self, direction: int) -> float:
        return self.rho_out if direction == OUTGOING else self.rho_in


class SwitchEvent(NamedTuple):
    time: float
    set_id: int


@dataclass(frozen=True)
class DefendedTrace:
    """Schedule-expanded cell sequence with real/dummy flags.

    Cells are sorted by time with ties broken outgoing-before-incoming; the
    per-direction inter-cell gap is constant within each phase, and each
    direction's cell count is a multiple of the bucket size.
    """

    times: np.ndarray
    directions: np.ndarray
    is_dummy: np.ndarray
    last_real_time: float
    switch_event: Optional[SwitchEvent] = None

    def __post_init__(self):
        for name in ("times", "directions", "is_dummy"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.times.size)

    def n_cells(self, direction: int) -> int:
        return int((self.directions == direction).sum())

    def n_real(self) -> int:
        return int((~self.is_dummy).sum())

    def observable(self) -> bytes:
        """The attacker-visible content: cell times and directions only."""
        return self.times.tobytes() + self.directions.tobytes()


@dataclass(frozen=True)
class OverheadPoint:
    bandwidth: float
    time: float
    params: TamarawParams
    degenerate: bool = False

    def __post_init__(self):
        if self.bandwidth < -1e-12 or self.time < -1e-12:
            raise ValueError("overheads cannot be negative")


def real_cell_indices(times: np.ndarray, rho: float) -> np.ndarray:
    """1-based tick index of each real cell under FIFO one-per-tick service.

    The i-th real cell of a direction rides tick s_i = max(ceil(t_i / rho),
    s_{i-1} + 1): the first tick at or after its arrival that is still free.
    """
    if times.size == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.ceil(times / rho - _TICK_EPS).astype(np.int64)
    raw = np.maximum(raw, 1)
    idx = np.arange(times.size, dtype=np.int64)
    # s'_i = i + max_{j<=i}(raw_j - j) realizes the FIFO recurrence
    return idx + np.maximum.accumulate(raw - idx)


def _direction_plan(trace: Trace, params: TamarawParams, direction: int,
                    ) -> tuple[np.ndarray, int, int]:
    """(real tick indices, last real tick, padded total) for one direction."""
    rho = params.rho(direction)
    reals = real_cell_indices(trace.direction_times(direction), rho)
    s_last = int(reals[-1]) if reals.size else 0
    L = params.bucket_size
    total = L * math.ceil(s_last / L) if s_last > 0 else L
    return reals, s_last, total


def defend(trace: Trace, params: TamarawParams) -> DefendedTrace:
    """Apply the constant-rate schedule to one trace.

    Each direction emits cells at rho, 2*rho, ...; real cells ride their FIFO
    tick, everything else is a dummy; the count is padded to a bucket
    multiple, and a direction with no real cells still emits one full bucket.
    """
    if len(trace) == 0:
        raise ValueError("cannot defend an empty trace")
    parts = []
    last_real = 0.0
    for direction in (OUTGOING, INCOMING):
        rho = params.rho(direction)
        reals, s_last, total = _direction_plan(trace, params, direction)
        ticks = np.arange(1, total + 1, dtype=np.int64)
        dummy = np.ones(total, dtype=bool)
        dummy[reals - 1] = False
        parts.append((ticks * rho, direction, dummy))
        last_real = max(last_real, s_last * rho)
    return _merge_cells(parts, last_real)


def _merge_cells(parts: Sequence[tuple[np.ndarray, int, np.ndarray]],
                 last_real_time: float,
                 switch_event: Optional[SwitchEvent] = None) -> DefendedTrace:
    """Interleave per-direction cell streams; ties go outgoing first."""
    times = np.concatenate([p[0] for p in parts])
    directions = np.concatenate(
        [np.full(p[0].size, p[1], dtype=np.int8) for p in parts])
    dummies = np.concatenate([p[2] for p in parts])
    order = np.lexsort((directions == INCOMING, times))
    return DefendedTrace(times[order], directions[order], dummies[order],
                         float(last_real_time), switch_event)


def defended_lengths(trace: Trace, params: TamarawParams) -> tuple[int, int]:
    """Per-direction padded cell counts without materializing cells.

    Matches defend()'s cell counts exactly; this is the hot path behind the
    clustering distance.
    """
    if len(trace) == 0:
        raise ValueError("cannot defend an empty trace")
    _, _, n_out = _direction_plan(trace, params, OUTGOING)
    _, _, n_in = _direction_plan(trace, params, INCOMING)
    return n_out, n_in


def last_tick_indices(trace: Trace, params: TamarawParams) -> tuple[int, int]:
    """Last real-cell tick per direction (0 if the direction is empty)."""
    _, s_out, _ = _direction_plan(trace, params, OUTGOING)
    _, s_in, _ = _direction_plan(trace, params, INCOMING)
    return s_out, s_in


def overheads(trace: Trace, defended: DefendedTrace,
              params: TamarawParams) -> OverheadPoint:
    """Bandwidth and time overhead of a defended trace.

    Bandwidth is the dummy-to-real cell ratio (total - N) / N; time is the
    relative delay of the last real cell.  A trace whose last real packet
    sits at t=0 has no meaningful time baseline: flagged degenerate,
    reported as 0.
    """
    n_real = len(trace)
    bandwidth = (len(defended) - n_real) / n_real
    t_n = trace.duration
    if t_n <= 0.0:
        return OverheadPoint(bandwidth, 0.0, params, degenerate=True)
    time_overhead = (defended.last_real_time - t_n) / t_n
    return OverheadPoint(bandwidth, max(0.0, time_overhead), params)


def overheads_from_lengths(n_real: int, total_cells: int, t_n: float,
                           last_real_time: float,
                           params: TamarawParams) -> OverheadPoint:
    """Cheap overhead computation from cached schedule summaries."""
    bandwidth = (total_cells - n_real) / n_real
    if t_n <= 0.0:
        return OverheadPoint(bandwidth, 0.0, params, degenerate=True)
    return OverheadPoint(bandwidth, max(0.0, (last_real_time - t_n) / t_n), params)


def build_param_grid(init: TamarawParams, factor_span: float = 7.0,
                     steps: int = 14) -> list[TamarawParams]:
    """Log-spaced grid of (rho_in, rho_out) pairs around an initial pair.

    Each axis takes ``steps`` values at the exact consecutive ratio
    factor_span ** (1 / factor_span), anchored so that both init/factor_span
    and init itself are grid points; the Cartesian product carries the
    bucket size over unchanged.  steps=1 degenerates to the initial pair.
    """
    if factor_span <= 1:
        raise ValueError("factor_span must exceed 1")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ratio = factor_span ** (1.0 / factor_span)
    offset = steps // 2
    exponents = [j - offset for j in range(steps)]
    rho_in_values = [init.rho_in * ratio ** e for e in exponents]
    rho_out_values = [init.rho_out * ratio ** e for e in exponents]
    return [TamarawParams(rho_out=ro, rho_in=ri, bucket_size=init.bucket_size)
            for ri in rho_in_values for ro in rho_out_values]


def pareto_filter(points: Sequence[OverheadPoint]) -> list[OverheadPoint]:
    """Drop every point strictly dominated in both overhead dimensions.

    p dominates q when p is <= in both coordinates and < in at least one.
    Survivors come back ordered by ascending time overhead (bandwidth, then
    parameter values, break ties).
    """
    if not points:
        raise ValueError("no overhead points to filter")
    survivors = []
    for p in points:
        dominated = any(
            q.bandwidth <= p.bandwidth and q.time <= p.time
            and (q.bandwidth < p.bandwidth or q.time < p.time)
            for q in points)
        if not dominated:
            survivors.append(p)
    survivors.sort(key=lambda p: (p.time, p.bandwidth, p.params.rho_in,
                                  p.params.rho_out))
    return survivors
