"""Adaptive constant-rate padding defense toolkit.

Implements the full pipeline: trace ingestion and count matrices, the
constant-rate padding engine with Pareto-filtered parameter grids,
intra-site pattern mining, k-anonymous pattern-set construction with an
attacker-accuracy distance, safe-time early switching, the provable bound
on any attacker's average success, and a closed-world attacker that
validates the bound empirically.
"""

from .tamaraw import (DefendedTrace, OverheadPoint, TamarawParams, defend,
                      defended_lengths, build_param_grid, overheads,
                      pareto_filter)
from .trace import (Packet, TAM, Trace, compute_tam, parse_trace,
                    serialize_trace, truncate_prefix)

__version__ = "0.1.0"

__all__ = [
    "DefendedTrace", "OverheadPoint", "Packet", "TAM", "TamarawParams",
    "Trace", "build_param_grid", "compute_tam", "defend", "defended_lengths",
    "overheads", "pareto_filter", "parse_trace", "serialize_trace",
    "truncate_prefix", "__version__",
]
