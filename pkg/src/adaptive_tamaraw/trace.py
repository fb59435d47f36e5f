"""Trace model: timestamped cell sequences, slotted count matrices, prefixes.

A trace is the ordered list of (timestamp, direction) cells observed for one
page load; +1 is outgoing (client to network), -1 incoming.  Cells are padded
to a fixed size upstream, so timing and direction are the only observables.

Trace files carry one ``time<TAB>direction`` line per cell, one trace per
file.  Labeled files are named ``<site>-<instance>``, unlabeled ones
``<instance>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import TraceFormatError

#: Absolute tolerance for timestamp comparisons, in seconds.
TIME_TOLERANCE = 1e-9

#: Default slot width for the 2xN count matrix, in seconds.
DEFAULT_SLOT_WIDTH = 0.080

#: Default number of slots covered by the count matrix.
DEFAULT_N_SLOTS = 1000

OUTGOING = 1
INCOMING = -1


class Packet(NamedTuple):
    time: float
    direction: int


@dataclass(frozen=True)
class Trace:
    """One page load: times and directions, plus its (site, instance) label.

    ``times`` is non-decreasing and non-negative; ``directions`` holds only
    +1/-1.  Instances are immutable and safe to share across workers.
    """

    times: np.ndarray
    directions: np.ndarray
    site_id: int = -1
    instance_id: int = -1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        directions = np.asarray(self.directions, dtype=np.int8)
        if times.shape != directions.shape or times.ndim != 1:
            raise ValueError("times and directions must be 1-D and equal length")
        if times.size and times.min() < 0:
            raise ValueError("negative timestamp")
        if times.size and np.any(np.diff(times) < -TIME_TOLERANCE):
            raise ValueError("timestamps not sorted")
        if directions.size and not np.all(np.abs(directions) == 1):
            raise ValueError("direction outside {+1, -1}")
        times.setflags(write=False)
        directions.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "directions", directions)

    @classmethod
    def from_packets(cls, packets: Iterable[tuple[float, int]],
                     site_id: int = -1, instance_id: int = -1) -> "Trace":
        pkts = list(packets)
        times = np.array([p[0] for p in pkts], dtype=np.float64)
        directions = np.array([p[1] for p in pkts], dtype=np.int8)
        return cls(times, directions, site_id, instance_id)

    @property
    def packets(self) -> list[Packet]:
        return [Packet(float(t), int(d)) for t, d in zip(self.times, self.directions)]

    def __len__(self) -> int:
        return int(self.times.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.site_id == other.site_id
                and self.instance_id == other.instance_id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.directions, other.directions))

    def __hash__(self):
        return hash((self.site_id, self.instance_id,
                     self.times.tobytes(), self.directions.tobytes()))

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self) else 0.0

    def direction_times(self, direction: int) -> np.ndarray:
        return self.times[self.directions == direction]

    def key(self) -> tuple[int, int]:
        return (self.site_id, self.instance_id)


@dataclass(frozen=True)
class TAM:
    """Slotted 2xN packet-count matrix: per-slot outgoing and incoming counts.

    Cells past the covered window (slot index >= n_slots) are dropped, never
    folded into the last slot, so row sums never exceed the trace length.
    """

    out_counts: np.ndarray
    in_counts: np.ndarray
    slot_width: float

    def __post_init__(self):
        out = np.asarray(self.out_counts, dtype=np.int64)
        inc = np.asarray(self.in_counts, dtype=np.int64)
        if out.shape != inc.shape or out.ndim != 1:
            raise ValueError("count rows must be 1-D and equal length")
        if (out < 0).any() or (inc < 0).any():
            raise ValueError("negative slot count")
        out.setflags(write=False)
        inc.setflags(write=False)
        object.__setattr__(self, "out_counts", out)
        object.__setattr__(self, "in_counts", inc)

    @property
    def n_slots(self) -> int:
        return int(self.out_counts.size)

    def flatten(self) -> np.ndarray:
        """Both rows concatenated as float64, the clustering feature vector."""
        return np.concatenate([self.out_counts, self.in_counts]).astype(np.float64)

    def total(self) -> int:
        return int(self.out_counts.sum() + self.in_counts.sum())


def parse_trace(content: str, site_id: int = -1, instance_id: int = -1) -> Trace:
    """Parse ``time<TAB>direction`` lines into a Trace.

    Each non-empty line must be a float timestamp, a tab, and an integer
    direction in {1, -1} (leading ``+`` accepted).  Timestamps must be
    non-decreasing up to a 1e-9 s tolerance; violations, malformed lines and
    empty files raise TraceFormatError with the offending line number.
    """
    times: list[float] = []
    directions: list[int] = []
    previous = -math.inf
    for line_number, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TraceFormatError(
                f"expected 'time<TAB>direction', got {raw!r}", line_number)
        try:
            time = float(parts[0])
        except ValueError:
            raise TraceFormatError(f"bad timestamp {parts[0]!r}", line_number) from None
        dir_token = parts[1]
        if dir_token.startswith("+"):
            dir_token = dir_token[1:]
        try:
            direction = int(dir_token)
        except ValueError:
            raise TraceFormatError(f"bad direction {parts[1]!r}", line_number) from None
        if direction not in (OUTGOING, INCOMING):
            raise TraceFormatError(
                f"direction {direction} outside {{+1, -1}}", line_number)
        if time < 0:
            raise TraceFormatError(f"negative timestamp {time!r}", line_number)
        if time < previous - TIME_TOLERANCE:
            raise TraceFormatError(
                f"out-of-order timestamp {time!r} after {previous!r}", line_number)
        previous = max(previous, time)
        times.append(time)
        directions.append(direction)
    if not times:
        raise TraceFormatError("empty trace file")
    return Trace(np.array(times), np.array(directions, dtype=np.int8),
                 site_id, instance_id)


def serialize_trace(trace: Trace) -> str:
    """Inverse of parse_trace; parse(serialize(t)) reproduces t exactly."""
    lines = [f"{float(t)!r}\t{int(d)}" for t, d in zip(trace.times, trace.directions)]
    return "\n".join(lines) + "\n"


def compute_tam(trace: Trace, slot_width: float = DEFAULT_SLOT_WIDTH,
                n_slots: int = DEFAULT_N_SLOTS) -> TAM:
    """Count per-slot outgoing/incoming cells over a fixed time window.

    A cell at time t lands in slot floor(t / slot_width); a cell exactly on
    a boundary therefore belongs to the later slot.  Slots at index n_slots
    or beyond are dropped.
    """
    if slot_width <= 0:
        raise ValueError("slot_width must be positive")
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    if len(trace) == 0:
        raise ValueError("cannot compute a count matrix for an empty trace")
    slots = np.floor(trace.times / slot_width).astype(np.int64)
    keep = slots < n_slots
    slots = slots[keep]
    dirs = trace.directions[keep]
    out = np.bincount(slots[dirs == OUTGOING], minlength=n_slots)
    inc = np.bincount(slots[dirs == INCOMING], minlength=n_slots)
    return TAM(out[:n_slots], inc[:n_slots], slot_width)


def truncate_prefix(trace: Trace, horizon: float) -> Trace:
    """Keep exactly the cells with time <= horizon; labels preserved.

    May return an empty trace; callers decide how to treat that.
    Idempotent for a fixed horizon.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    keep = trace.times <= horizon
    return Trace(trace.times[keep], trace.directions[keep],
                 trace.site_id, trace.instance_id)
