"""Dataset handling: directory ingestion, manifests, and stratified splits.

A dataset is a list of labeled traces plus a per-trace split assignment.
Splits are stratified per site at a configurable ratio (8:1:1 by default)
and fully determined by the seed.  The manifest is a JSON document listing
file paths, labels and split assignments; loaders reject unknown fields so
stale or foreign manifests fail loudly instead of mixing runs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError, MissingArtifactError, TraceFormatError
from .trace import Trace, parse_trace

SPLITS = ("train", "validation", "test")
DEFAULT_RATIOS = (8, 1, 1)

_LABELED_NAME = re.compile(r"^(\d+)-(\d+)$")
_UNLABELED_NAME = re.compile(r"^(\d+)$")

_MANIFEST_FIELDS = {"format", "seed", "ratios", "traces"}
_ENTRY_FIELDS = {"path", "site", "instance", "split"}


@dataclass
class Dataset:
    """Labeled traces with one split assignment per trace."""

    traces: list[Trace]
    splits: dict[tuple[int, int], str]

    def __post_init__(self):
        keys = [t.key() for t in self.traces]
        if len(set(keys)) != len(keys):
            raise ManifestError("duplicate (site, instance) pair in dataset")
        missing = [k for k in keys if k not in self.splits]
        if missing:
            raise ManifestError(f"traces without split assignment: {missing[:3]}")

    def split(self, name: str) -> list[Trace]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [t for t in self.traces if self.splits[t.key()] == name]

    def site_ids(self) -> list[int]:
        return sorted({t.site_id for t in self.traces})

    def by_site(self, split_name: str | None = None) -> dict[int, list[Trace]]:
        traces = self.traces if split_name is None else self.split(split_name)
        out: dict[int, list[Trace]] = {}
        for t in traces:
            out.setdefault(t.site_id, []).append(t)
        return out


def assign_splits(traces: list[Trace], seed: int,
                  ratios: tuple[int, int, int] = DEFAULT_RATIOS,
                  ) -> dict[tuple[int, int], str]:
    """Per-site stratified split, deterministic under a fixed seed.

    Validation and test sizes are floor(n * ratio); the remainder trains.
    Each site is shuffled by its own seeded generator so adding a site never
    perturbs the assignment of another.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    total = float(sum(ratios))
    per_site: dict[int, list[Trace]] = {}
    for t in traces:
        per_site.setdefault(t.site_id, []).append(t)
    assignment: dict[tuple[int, int], str] = {}
    for site_id in sorted(per_site):
        site_traces = sorted(per_site[site_id], key=lambda t: t.instance_id)
        rng = np.random.default_rng([seed, site_id])
        order = rng.permutation(len(site_traces))
        n = len(site_traces)
        n_val = int(n * ratios[1] / total)
        n_test = int(n * ratios[2] / total)
        for rank, idx in enumerate(order):
            if rank < n_val:
                split = "validation"
            elif rank < n_val + n_test:
                split = "test"
            else:
                split = "train"
            assignment[site_traces[idx].key()] = split
    return assignment


def parse_trace_filename(name: str) -> tuple[int, int]:
    """Map ``<site>-<instance>`` or ``<instance>`` to (site, instance).

    Unlabeled files get site -1.
    """
    m = _LABELED_NAME.match(name)
    if m:
        return int(m.group(1)), int(m.group(2))
    m = _UNLABELED_NAME.match(name)
    if m:
        return -1, int(m.group(1))
    raise ManifestError(f"trace filename {name!r} is neither <site>-<instance> "
                        "nor <instance>")


def load_trace_file(path: Path, site_id: int, instance_id: int) -> Trace:
    try:
        return parse_trace(path.read_text(), site_id, instance_id)
    except TraceFormatError as exc:
        raise TraceFormatError(f"{path}: {exc}") from exc


def load_trace_dir(data_dir: Path, seed: int,
                   ratios: tuple[int, int, int] = DEFAULT_RATIOS) -> Dataset:
    """Ingest every trace file in a directory and assign splits.

    Traces are merged in (site, instance) order regardless of filesystem
    enumeration order, so the result is deterministic.
    """
    data_dir = Path(data_dir)
    entries = []
    for path in data_dir.iterdir():
        if not path.is_file():
            continue
        site_id, instance_id = parse_trace_filename(path.name)
        entries.append((site_id, instance_id, path))
    if not entries:
        raise ManifestError(f"no trace files in {data_dir}")
    entries.sort(key=lambda e: (e[0], e[1]))
    traces = [load_trace_file(path, site, inst) for site, inst, path in entries]
    return Dataset(traces, assign_splits(traces, seed, ratios))


def manifest_payload(dataset: Dataset, paths: dict[tuple[int, int], str],
                     seed: int, ratios: tuple[int, int, int]) -> dict:
    rows = []
    for t in dataset.traces:
        rows.append({
            "path": paths[t.key()],
            "site": t.site_id,
            "instance": t.instance_id,
            "split": dataset.splits[t.key()],
        })
    return {"format": "trace-manifest/1", "seed": seed,
            "ratios": list(ratios), "traces": rows}


def load_manifest(manifest_path: Path) -> Dataset:
    """Load traces listed in a manifest, rejecting unknown fields."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingArtifactError(
            f"no manifest at {manifest_path}; run synth or ingest first")
    try:
        payload = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ManifestError(f"{manifest_path}: manifest must be a JSON object")
    unknown = set(payload) - _MANIFEST_FIELDS
    if unknown:
        raise ManifestError(f"{manifest_path}: unknown manifest fields {sorted(unknown)}")
    if payload.get("format") != "trace-manifest/1":
        raise ManifestError(f"{manifest_path}: unsupported manifest format "
                            f"{payload.get('format')!r}")
    traces: list[Trace] = []
    splits: dict[tuple[int, int], str] = {}
    for row in payload.get("traces", []):
        unknown = set(row) - _ENTRY_FIELDS
        if unknown:
            raise ManifestError(
                f"{manifest_path}: unknown trace fields {sorted(unknown)}")
        if row["split"] not in SPLITS:
            raise ManifestError(f"{manifest_path}: unknown split {row['split']!r}")
        path = Path(row["path"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        trace = load_trace_file(path, int(row["site"]), int(row["instance"]))
        traces.append(trace)
        splits[trace.key()] = row["split"]
    if not traces:
        raise ManifestError(f"{manifest_path}: manifest lists no traces")
    traces.sort(key=Trace.key)
    return Dataset(traces, splits)
