"""Pipeline stages behind the CLI: one artifact per stage, re-runnable.

Every stage reads its inputs from the workspace, verifies they were
produced under the current configuration hash, and writes deterministic
artifacts, so re-running any stage with unchanged inputs and seed is
byte-identical.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import adaptive, anonymity, attack, bounds
from .artifacts import (canonical_json, config_hash, encode_float,
                        load_detector, read_artifact, save_detector,
                        write_artifact, write_csv)
from .dataset import (Dataset, assign_splits, load_manifest, load_trace_dir,
                      manifest_payload)
from .detector import (DetectorConfig, TwoStageDetector, SafeTimeTable,
                       assign_to_patterns, train_detector)
from .errors import DataError, MissingArtifactError
from .kfp import ForestConfig
from .patterns import MinerConfig, PatternSet, mine_patterns
from .synth import SynthConfig, generate_corpus
from .tamaraw import (OverheadPoint, TamarawParams, build_param_grid, defend,
                      overheads, pareto_filter)
from .trace import Trace, compute_tam, serialize_trace

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 1337,
    "dataset": {
        "kind": "synthetic",
        "sites": 20,
        "traces_per_site": 40,
        "data_dir": None,
        "ratios": [8, 1, 1],
    },
    "tam": {"slot_width": 0.08, "n_slots": 1000},
    "miner": {"k_neighbors": 7, "max_clusters": 6,
              "expansion_metric": "similarity"},
    "grid": {"rho_out": 0.04, "rho_in": 0.012, "factor_span": 7.0,
             "steps": 14, "bucket_sizes": [100, 500, 1000]},
    "sets": {"k_values": [2, 7, 30], "weight_mode": "traces"},
    "detector": {"alpha": 0.9, "checkpoint_step": 0.5,
                 "checkpoint_max": 20.0, "trees": 100, "max_depth": 16,
                 "k_nn": 3},
    "simulate": {"pairs": [[7, 100]],
                 "time_ceilings": [0.1, 0.45, 1.25, 2.5]},
    "attack": {"k": 7, "bucket_size": 100, "n_configs": 4,
               "tolerance": 0.03},
}


def merge_config(overrides: Mapping[str, Any] | None) -> dict[str, Any]:
    """Defaults deep-merged with a config document; unknown keys rejected."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if overrides is None:
        return config

    def merge(base: dict, extra: Mapping, path: str) -> None:
        for key, value in extra.items():
            if key not in base:
                raise DataError(f"unknown config key {path}{key}")
            if isinstance(base[key], dict) and isinstance(value, Mapping):
                merge(base[key], value, f"{path}{key}.")
            else:
                base[key] = value

    merge(config, overrides, "")
    return config


@dataclass
class Workspace:
    """A run directory plus the configuration that governs it."""

    root: Path
    config: dict[str, Any]

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(self.config)
        config_path = self.root / "config.json"
        payload = canonical_json({"config": self.config, "hash": self.hash})
        if config_path.exists():
            existing = json.loads(config_path.read_text())
            if existing.get("hash") != self.hash:
                raise DataError(
                    f"workspace {self.root} was initialized with config "
                    f"{existing.get('hash')}, current is {self.hash}; use a "
                    "fresh workspace or the original config")
        else:
            config_path.write_text(payload + "\n")

    def path(self, name: str) -> Path:
        return self.root / name

    # -- shared loaders ----------------------------------------------------

    def dataset(self) -> Dataset:
        return load_manifest(self.path("manifest.json"))

    def train_traces(self, dataset: Dataset | None = None) -> list[Trace]:
        ds = dataset or self.dataset()
        return sorted(ds.split("train"), key=Trace.key)

    def seed(self) -> int:
        return int(self.config["seed"])

    def miner_config(self) -> MinerConfig:
        m, t = self.config["miner"], self.config["tam"]
        return MinerConfig(k_neighbors=m["k_neighbors"],
                           max_clusters=m["max_clusters"],
                           slot_width=t["slot_width"], n_slots=t["n_slots"],
                           expansion_metric=m["expansion_metric"])

    def detector_config(self) -> DetectorConfig:
        d, t = self.config["detector"], self.config["tam"]
        step, horizon = d["checkpoint_step"], d["checkpoint_max"]
        n = int(round(horizon / step))
        checkpoints = tuple(round(step * (i + 1), 9) for i in range(n))
        return DetectorConfig(
            alpha=d["alpha"], checkpoints=checkpoints,
            slot_width=t["slot_width"], n_slots=t["n_slots"],
            forest=ForestConfig(d["trees"], d["max_depth"], d["k_nn"]))

    def full_grid(self, bucket_size: int) -> list[TamarawParams]:
        g = self.config["grid"]
        init = TamarawParams(g["rho_out"], g["rho_in"], bucket_size)
        return build_param_grid(init, g["factor_span"], g["steps"])

    def pareto_params(self, bucket_size: int) -> list[TamarawParams]:
        data = read_artifact(self.path("pareto.json"), "pareto/1", self.hash)
        entry = data.get(str(bucket_size))
        if entry is None:
            raise MissingArtifactError(
                f"pareto artifact has no bucket size {bucket_size}")
        return [TamarawParams(rho_out, rho_in, bucket_size)
                for rho_out, rho_in in entry["pareto"]]


# -- dataset stages ---------------------------------------------------------

def stage_synth(ws: Workspace) -> Path:
    """Generate the synthetic corpus into the workspace and write the
    manifest; also records the generator's planted pattern labels as a
    diagnostics sidecar (nothing downstream reads it)."""
    cfg = ws.config["dataset"]
    if cfg["kind"] != "synthetic":
        raise DataError("dataset.kind must be 'synthetic' for the synth stage")
    synth_config = SynthConfig(n_sites=cfg["sites"],
                               traces_per_site=cfg["traces_per_site"],
                               seed=ws.seed())
    corpus = generate_corpus(synth_config)
    trace_dir = ws.path("traces")
    trace_dir.mkdir(exist_ok=True)
    paths = {}
    for trace in corpus.traces:
        name = f"{trace.site_id}-{trace.instance_id}"
        (trace_dir / name).write_text(serialize_trace(trace))
        paths[trace.key()] = f"traces/{name}"
    splits = assign_splits(corpus.traces, ws.seed(), tuple(cfg["ratios"]))
    dataset = Dataset(corpus.traces, splits)
    manifest = manifest_payload(dataset, paths, ws.seed(), tuple(cfg["ratios"]))
    out = ws.path("manifest.json")
    out.write_text(canonical_json(manifest) + "\n")
    labels = {f"{s}-{i}": lab for (s, i), lab in
              sorted(corpus.pattern_labels.items())}
    write_artifact(ws.path("synth_labels.json"), "synth-labels/1", ws.hash,
                   labels)
    return out


def stage_ingest(ws: Workspace, data_dir: Path | None = None) -> Path:
    """Build the manifest from an existing directory of trace files."""
    cfg = ws.config["dataset"]
    directory = Path(data_dir or cfg["data_dir"] or "")
    if not directory or not directory.is_dir():
        raise DataError("ingest needs dataset.data_dir or --data-dir")
    dataset = load_trace_dir(directory, ws.seed(), tuple(cfg["ratios"]))
    paths = {}
    for trace in dataset.traces:
        if trace.site_id >= 0:
            paths[trace.key()] = str((directory / f"{trace.site_id}-{trace.instance_id}").resolve())
        else:
            paths[trace.key()] = str((directory / f"{trace.instance_id}").resolve())
    manifest = manifest_payload(dataset, paths, ws.seed(), tuple(cfg["ratios"]))
    out = ws.path("manifest.json")
    out.write_text(canonical_json(manifest) + "\n")
    return out


def stage_tam(ws: Workspace) -> Path:
    """Count-matrix artifact for every trace, in (site, instance) order."""
    dataset = ws.dataset()
    t = ws.config["tam"]
    rows = []
    matrices = []
    for trace in dataset.traces:
        tam = compute_tam(trace, t["slot_width"], t["n_slots"])
        matrices.append(tam.flatten())
        rows.append([trace.site_id, trace.instance_id,
                     dataset.splits[trace.key()]])
    np.save(ws.path("tams.npy"), np.stack(matrices))
    write_artifact(ws.path("tams.json"), "tam-index/1", ws.hash,
                   {"slot_width": t["slot_width"], "n_slots": t["n_slots"],
                    "traces": rows})
    return ws.path("tams.npy")


# -- engine stages ----------------------------------------------------------

def stage_defend(ws: Workspace, params: TamarawParams,
                 site: int | None = None, instance: int | None = None) -> Path:
    """Pure constant-rate padding; one trace to cells CSV, or the whole
    corpus to an overheads CSV."""
    dataset = ws.dataset()
    if site is not None and instance is not None:
        match = [t for t in dataset.traces
                 if t.site_id == site and t.instance_id == instance]
        if not match:
            raise DataError(f"no trace {site}-{instance} in the dataset")
        trace = match[0]
        defended = defend(trace, params)
        out = ws.path(f"defended/{site}-{instance}.csv")
        write_csv(out, ["time", "direction", "is_dummy"],
                  [[float(t), int(d), bool(x)] for t, d, x in
                   zip(defended.times, defended.directions, defended.is_dummy)])
        return out
    rows = []
    for trace in dataset.traces:
        point = overheads(trace, defend(trace, params), params)
        rows.append([trace.site_id, trace.instance_id, params.rho_in,
                     params.rho_out, params.bucket_size, point.bandwidth,
                     point.time, point.degenerate])
    out = ws.path("defended_overheads.csv")
    write_csv(out, ["site", "instance", "rho_in", "rho_out", "L",
                    "bandwidth", "time", "degenerate"], rows)
    return out


def stage_pareto(ws: Workspace) -> Path:
    """Sweep the parameter grid on the training split and keep the frontier."""
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    if not train:
        raise DataError("training split is empty")
    result = {}
    csv_rows = []
    for bucket_size in ws.config["grid"]["bucket_sizes"]:
        grid = ws.full_grid(bucket_size)
        cache = anonymity.LengthCache(train, grid)
        bw, tm = cache.overhead_matrices()
        mean_bw, mean_tm = bw.mean(axis=0), tm.mean(axis=0)
        points = [OverheadPoint(float(mean_bw[i]), float(mean_tm[i]), grid[i])
                  for i in range(len(grid))]
        frontier = pareto_filter(points)
        result[str(bucket_size)] = {
            "grid": [[p.rho_out, p.rho_in] for p in grid],
            "overheads": [[float(mean_bw[i]), float(mean_tm[i])]
                          for i in range(len(grid))],
            "pareto": [[p.params.rho_out, p.params.rho_in] for p in frontier],
        }
        for p in frontier:
            csv_rows.append([p.params.rho_in, p.params.rho_out, bucket_size,
                             p.bandwidth, p.time])
    write_artifact(ws.path("pareto.json"), "pareto/1", ws.hash, result)
    write_csv(ws.path("pareto.csv"),
              ["rho_in", "rho_out", "L", "bandwidth", "time"], csv_rows)
    return ws.path("pareto.json")


# -- clustering stages -------------------------------------------------------

def stage_patterns(ws: Workspace) -> Path:
    """Mine per-site patterns on the training split."""
    dataset = ws.dataset()
    miner = ws.miner_config()
    by_site = ws_train_by_site(ws, dataset)
    payload = []
    for site in sorted(by_site):
        pset = mine_patterns(by_site[site], miner)
        payload.append({
            "site": site,
            "threshold": pset.threshold,
            "cleaning_converged": pset.cleaning_converged,
            "growth_converged": pset.growth_converged,
            "clusters": [
                {"pattern_index": ci,
                 "instances": [by_site[site][m].instance_id for m in members]}
                for ci, members in enumerate(pset.clusters)],
        })
    write_artifact(ws.path("patterns.json"), "patterns/1", ws.hash, payload)
    return ws.path("patterns.json")


def ws_train_by_site(ws: Workspace, dataset: Dataset | None = None,
                     ) -> dict[int, list[Trace]]:
    ds = dataset or ws.dataset()
    by_site = ds.by_site("train")
    return {site: sorted(traces, key=lambda t: t.instance_id)
            for site, traces in by_site.items()}


def load_pattern_sets(ws: Workspace, by_site: Mapping[int, Sequence[Trace]],
                      ) -> list[PatternSet]:
    """Rehydrate mining output against the training split."""
    payload = read_artifact(ws.path("patterns.json"), "patterns/1", ws.hash)
    sets = []
    for entry in payload:
        site = entry["site"]
        traces = by_site[site]
        index_of = {t.instance_id: i for i, t in enumerate(traces)}
        clusters = [[index_of[i] for i in cluster["instances"]]
                    for cluster in entry["clusters"]]
        sets.append(PatternSet(site, clusters, entry["threshold"],
                               entry["cleaning_converged"],
                               entry["growth_converged"]))
    return sets


def build_patterns(ws: Workspace, by_site: Mapping[int, Sequence[Trace]],
                   train: Sequence[Trace]) -> list[anonymity.Pattern]:
    pattern_sets = load_pattern_sets(ws, by_site)
    trace_index = {t.key(): i for i, t in enumerate(train)}
    return anonymity.patterns_from_mining(pattern_sets, trace_index, by_site)


def stage_sets(ws: Workspace) -> list[Path]:
    """Build anonymity sets for every configured (k, L) and pick each set's
    per-global-parameter local padding parameters."""
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    by_site = ws_train_by_site(ws, dataset)
    patterns = build_patterns(ws, by_site, train)
    outputs = []
    purity_rows = []
    for bucket_size in ws.config["grid"]["bucket_sizes"]:
        pareto_params = ws.pareto_params(bucket_size)
        dist_cache = anonymity.LengthCache(train, pareto_params)
        full_grid = ws.full_grid(bucket_size)
        full_cache = anonymity.LengthCache(train, full_grid)
        bw, tm = full_cache.overhead_matrices()
        for k in ws.config["sets"]["k_values"]:
            if len(patterns) < k:
                raise DataError(f"only {len(patterns)} patterns mined; "
                                f"cannot build k={k} sets")
            built = anonymity.build_sets(patterns, k, pareto_params, dist_cache)
            entries = []
            for aset in built:
                ids = aset.trace_ids()
                set_bw, set_tm = bw[ids].mean(axis=0), tm[ids].mean(axis=0)
                local_by_param = {}
                for gi, gparams in enumerate(pareto_params):
                    g_idx = full_grid.index(gparams)
                    ok = (set_bw < set_bw[g_idx]) & (set_tm < set_tm[g_idx])
                    if ok.any():
                        cand = np.where(ok)[0]
                        best = int(cand[np.argmin((set_bw + set_tm)[cand])])
                        local_by_param[str(gi)] = [full_grid[best].rho_out,
                                                   full_grid[best].rho_in]
                    else:
                        local_by_param[str(gi)] = None
                entries.append({
                    "set_id": aset.set_id,
                    "members": aset.member_keys(),
                    "pattern_ids": sorted(p.pattern_id for p in aset.patterns),
                    "n_traces": len(ids),
                    "sites": sorted(aset.sites()),
                    "local_params": local_by_param,
                    "mean_accuracy": anonymity.set_mean_accuracy(aset, dist_cache),
                })
            values, mean_purity = anonymity.purity(built, train)
            for aset, value in zip(built, values):
                purity_rows.append([k, bucket_size, aset.set_id, value,
                                    len(aset.patterns), len(aset.sites())])
            out = ws.path(f"sets_k{k}_L{bucket_size}.json")
            write_artifact(out, "anonymity-sets/1", ws.hash, {
                "k": k, "L": bucket_size,
                "pareto": [[p.rho_out, p.rho_in] for p in pareto_params],
                "sets": entries,
                "mean_purity": mean_purity,
                "purity_reference": 100.0 / k,
            })
            outputs.append(out)
    write_csv(ws.path("purity.csv"),
              ["k", "L", "set_id", "purity_pct", "n_patterns", "n_sites"],
              purity_rows)
    return outputs


def load_sets(ws: Workspace, k: int, bucket_size: int,
              patterns: Sequence[anonymity.Pattern],
              ) -> tuple[list[anonymity.AnonymitySet], dict]:
    data = read_artifact(ws.path(f"sets_k{k}_L{bucket_size}.json"),
                         "anonymity-sets/1", ws.hash)
    by_id = {(p.site_id, p.cluster_index): p for p in patterns}
    rebuilt = []
    for entry in data["sets"]:
        aset = anonymity.AnonymitySet(entry["set_id"])
        for site, cluster_index in entry["members"]:
            aset.patterns.append(by_id[(site, cluster_index)])
        rebuilt.append(aset)
    return rebuilt, data


# -- detector stages ---------------------------------------------------------

def stage_safetimes(ws: Workspace) -> list[Path]:
    """Train the two-stage detector once, then derive safe switch times for
    every configured (k, L)."""
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    by_site = ws_train_by_site(ws, dataset)
    pattern_sets = load_pattern_sets(ws, by_site)
    dconfig = ws.detector_config()
    tam_cfg = ws.config["tam"]

    labels_by_site = {}
    for pset in pattern_sets:
        labels = [0] * sum(len(c) for c in pset.clusters)
        for ci, members in enumerate(pset.clusters):
            for m in members:
                labels[m] = ci
        labels_by_site[pset.site_id] = labels

    # the set map is (k, L)-specific; train banks once with an empty map
    detector = train_detector(by_site, labels_by_site, {}, dconfig, ws.seed())
    save_detector(detector, ws.path("detector"), ws.hash)

    validation = sorted(dataset.split("validation"), key=Trace.key)
    val_patterns = assign_to_patterns(validation, pattern_sets, by_site,
                                      tam_cfg["slot_width"], tam_cfg["n_slots"])
    patterns = build_patterns(ws, by_site, train)
    outputs = []
    for bucket_size in ws.config["grid"]["bucket_sizes"]:
        for k in ws.config["sets"]["k_values"]:
            sets, _ = load_sets(ws, k, bucket_size, patterns)
            set_map = {(p.site_id, p.cluster_index): aset.set_id
                       for aset in sets for p in aset.patterns}
            detector.set_map = set_map
            true_sets = [set_map[(t.site_id, val_patterns[i])]
                         for i, t in enumerate(validation)]
            table = detector.compute_safe_times(validation, true_sets)
            retained = detector.retained_checkpoints()
            out = ws.path(f"safetimes_k{k}_L{bucket_size}.json")
            write_artifact(out, "safetimes/1", ws.hash, {
                "k": k, "L": bucket_size, "alpha": dconfig.alpha,
                "checkpoints": list(dconfig.checkpoints),
                "safe_times": {str(s): encode_float(t)
                               for s, t in sorted(table.safe_times.items())},
                "full_accuracy": {str(s): v for s, v in
                                  sorted(table.full_accuracy.items())},
                "curves": {str(s): v for s, v in
                           sorted(table.accuracy_curves.items())},
                "flags": {str(s): v for s, v in sorted(table.flags.items())},
                "retained_checkpoints": {str(site): times for site, times in
                                         sorted(retained.items())},
                "set_map": [[s, p, sid] for (s, p), sid in sorted(set_map.items())],
            })
            outputs.append(out)
    return outputs


def load_safetime_table(ws: Workspace, k: int, bucket_size: int,
                        ) -> tuple[SafeTimeTable, dict[tuple[int, int], int]]:
    data = read_artifact(ws.path(f"safetimes_k{k}_L{bucket_size}.json"),
                         "safetimes/1", ws.hash)
    table = SafeTimeTable(
        checkpoints=[float(c) for c in data["checkpoints"]],
        alpha=data["alpha"],
        safe_times={int(s): (math.inf if t is None else float(t))
                    for s, t in data["safe_times"].items()},
        full_accuracy={int(s): v for s, v in data["full_accuracy"].items()},
        accuracy_curves={int(s): v for s, v in data["curves"].items()},
        flags={int(s): v for s, v in data["flags"].items()},
    )
    set_map = {(int(s), int(p)): int(sid) for s, p, sid in data["set_map"]}
    return table, set_map


def detector_for(ws: Workspace, k: int, bucket_size: int) -> TwoStageDetector:
    detector = load_detector(ws.path("detector"), ws.hash)
    table, set_map = load_safetime_table(ws, k, bucket_size)
    detector.set_map = set_map
    detector.table = table
    detector.prune()
    return detector


# -- simulation / bound / attack stages --------------------------------------

def adaptive_configs(ws: Workspace, k: int, bucket_size: int,
                     sets_data: dict, table: SafeTimeTable,
                     ) -> list[adaptive.AdaptiveConfig]:
    """One simulator config per global Pareto parameter pair."""
    pareto_params = [TamarawParams(ro, ri, bucket_size)
                     for ro, ri in sets_data["pareto"]]
    checkpoints = [float(c) for c in table.checkpoints]
    configs = []
    for gi, gparams in enumerate(pareto_params):
        local = {}
        for entry in sets_data["sets"]:
            pair = entry["local_params"].get(str(gi))
            set_id = entry["set_id"]
            if pair is None or math.isinf(table.safe_times.get(set_id, math.inf)):
                local[set_id] = None
            else:
                local[set_id] = TamarawParams(pair[0], pair[1], bucket_size)
        configs.append(adaptive.AdaptiveConfig(gparams, local, checkpoints))
    return configs


def _switch_quality(report: adaptive.SimulationReport,
                    true_set_of: Mapping[tuple[int, int], int]) -> dict:
    correct = wrong = none = 0
    for row in report.rows:
        if not row.switched:
            none += 1
        elif true_set_of.get((row.site, row.instance)) == row.set_id:
            correct += 1
        else:
            wrong += 1
    total = max(1, len(report.rows))
    return {"correct": correct / total, "none": none / total,
            "wrong": wrong / total}


def stage_simulate(ws: Workspace) -> list[Path]:
    """Adaptive defense on the test split for each configured (k, L)."""
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    by_site = ws_train_by_site(ws, dataset)
    patterns = build_patterns(ws, by_site, train)
    pattern_sets = load_pattern_sets(ws, by_site)
    tam_cfg = ws.config["tam"]
    test = sorted(dataset.split("test"), key=Trace.key)
    test_patterns = assign_to_patterns(test, pattern_sets, by_site,
                                       tam_cfg["slot_width"], tam_cfg["n_slots"])
    outputs = []
    for k, bucket_size in ws.config["simulate"]["pairs"]:
        sets, sets_data = load_sets(ws, k, bucket_size, patterns)
        detector = detector_for(ws, k, bucket_size)
        configs = adaptive_configs(ws, k, bucket_size, sets_data, detector.table)
        report = adaptive.evaluate(test, configs, detector)
        true_set_of = {t.key(): detector.set_map[(t.site_id, test_patterns[i])]
                       for i, t in enumerate(test)}
        csv_rows = []
        for row in report.rows:
            params = configs[row.param_index].global_params
            csv_rows.append([
                row.param_index, params.rho_out, params.rho_in, bucket_size,
                row.site, row.instance, row.switched, row.set_id,
                row.switch_time, row.adaptive_bandwidth, row.adaptive_time,
                row.global_bandwidth, row.global_time, row.saving])
        csv_path = ws.path(f"simulation_k{k}_L{bucket_size}.csv")
        write_csv(csv_path,
                  ["param_index", "rho_out", "rho_in", "L", "site", "instance",
                   "switched", "set_id", "switch_time", "adaptive_bandwidth",
                   "adaptive_time", "global_bandwidth", "global_time",
                   "saving"], csv_rows)
        per_param = report.aggregates["per_param"]
        budget = adaptive.time_budget_table(
            report, ws.config["simulate"]["time_ceilings"])
        auc_global = adaptive.bandwidth_auc(
            [(v["global_time"], v["global_bandwidth"]) for v in per_param.values()])
        auc_adaptive = adaptive.bandwidth_auc(
            [(v["adaptive_time"], v["adaptive_bandwidth"]) for v in per_param.values()])
        edges, counts = adaptive.savings_histogram(report.rows)
        json_path = ws.path(f"simulation_k{k}_L{bucket_size}.json")
        write_artifact(json_path, "simulation/1", ws.hash, {
            "k": k, "L": bucket_size,
            "aggregates": report.aggregates,
            "switch_quality": _switch_quality(report, true_set_of),
            "time_budget": budget,
            "bandwidth_auc": {"global": auc_global, "adaptive": auc_adaptive},
            "savings_histogram": {"edges": edges, "counts": counts},
        })
        outputs.extend([csv_path, json_path])
    return outputs


def stage_bounds(ws: Workspace) -> Path:
    """Theoretical attacker-success bound per (k, L), averaged over the
    Pareto parameter pairs; every bound run re-verifies the set-side vs
    output-side identity."""
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    by_site = ws_train_by_site(ws, dataset)
    patterns = build_patterns(ws, by_site, train)
    sets_by_config: dict[tuple[int, int], list[anonymity.AnonymitySet]] = {}
    caches: dict[tuple[int, int], anonymity.LengthCache] = {}
    for bucket_size in ws.config["grid"]["bucket_sizes"]:
        pareto_params = ws.pareto_params(bucket_size)
        cache = anonymity.LengthCache(train, pareto_params)
        for k in ws.config["sets"]["k_values"]:
            sets, _ = load_sets(ws, k, bucket_size, patterns)
            sets_by_config[(k, bucket_size)] = sets
            caches[(k, bucket_size)] = cache
    report = bounds.bound_sweep(sets_by_config, caches,
                                ws.config["sets"]["weight_mode"])
    payload = {
        "aggregate": {f"{k},{L}": v for (k, L), v in report.aggregate.items()},
        "per_config": {f"{k},{L}": v for (k, L), v in report.per_config.items()},
        "per_set": {f"{k},{L}": {str(s): accs for s, accs in v.items()}
                    for (k, L), v in report.per_set.items()},
        "weights": {f"{k},{L}": v for (k, L), v in report.weights.items()},
        "caveat": report.caveat,
    }
    write_artifact(ws.path("bounds.json"), "bounds/1", ws.hash, payload)
    ks = sorted(ws.config["sets"]["k_values"])
    ls = sorted(ws.config["grid"]["bucket_sizes"])
    rows = [[k] + [report.aggregate[(k, L)] for L in ls] for k in ks]
    write_csv(ws.path("bounds.csv"), ["k"] + [f"L{L}" for L in ls], rows)
    return ws.path("bounds.json")


def stage_attack(ws: Workspace) -> Path:
    """Closed-world attacker on adaptively defended traces vs the bound.

    Emits the comparison table and raises BoundViolationError (CLI exit 3)
    when the attacker beats its per-configuration bound plus tolerance.
    """
    acfg = ws.config["attack"]
    k, bucket_size = acfg["k"], acfg["bucket_size"]
    dataset = ws.dataset()
    train = ws.train_traces(dataset)
    by_site = ws_train_by_site(ws, dataset)
    patterns = build_patterns(ws, by_site, train)
    sets, sets_data = load_sets(ws, k, bucket_size, patterns)
    detector = detector_for(ws, k, bucket_size)
    configs = adaptive_configs(ws, k, bucket_size, sets_data, detector.table)
    test = sorted(dataset.split("test"), key=Trace.key)
    rng = np.random.default_rng([ws.seed(), 424243])
    n_configs = min(acfg["n_configs"], len(configs))
    chosen = sorted(int(i) for i in
                    rng.choice(len(configs), size=n_configs, replace=False))
    pareto_params = [TamarawParams(ro, ri, bucket_size)
                     for ro, ri in sets_data["pareto"]]
    train_cache = anonymity.LengthCache(train, pareto_params)
    weights = bounds.set_weights(sets, ws.config["sets"]["weight_mode"])
    forest = ws.detector_config().forest
    train_sites = [t.site_id for t in train]
    test_sites = [t.site_id for t in test]

    outcomes, theory_bounds, pop_bounds, oracle_accs = [], [], [], []
    for gi in chosen:
        config = configs[gi]
        train_defended = [adaptive.simulate_trace(t, config, detector)[0]
                          for t in train]
        test_defended = [adaptive.simulate_trace(t, config, detector)[0]
                         for t in test]
        outcome = attack.closed_world_attack(
            train_defended, train_sites, test_defended, test_sites,
            config.global_params, forest,
            seed=(ws.seed() * 7_883 + gi) % (2**31))
        outcomes.append(outcome)
        theory_bounds.append(bounds.global_bound(sets, train_cache, gi, weights))
        pop_bounds.append(attack.population_bound(test_defended, test_sites))
        oracle_accs.append(attack.bucket_majority_accuracy(test_defended,
                                                           test_sites))
    csv_rows = []
    json_rows = []
    for gi, outcome, theory, pop, oracle in zip(chosen, outcomes,
                                                theory_bounds, pop_bounds,
                                                oracle_accs):
        params = outcome.params
        csv_rows.append([params.rho_out, params.rho_in, theory,
                         outcome.accuracy])
        json_rows.append({
            "param_index": gi,
            "rho_out": params.rho_out, "rho_in": params.rho_in,
            "theory_bound": theory, "population_bound": pop,
            "oracle_accuracy": oracle, "kfp_accuracy": outcome.accuracy,
        })
    write_csv(ws.path("attack.csv"),
              ["rho_out", "rho_in", "bound", "kfp_accuracy"], csv_rows)
    write_artifact(ws.path("attack.json"), "attack/1", ws.hash, {
        "k": k, "L": bucket_size, "tolerance": acfg["tolerance"],
        "configs": json_rows,
    })
    # the hard gate: an attacker past its bound is the pipeline's alarm
    attack.compare_with_bound(outcomes, theory_bounds, oracle_accs,
                              tolerance=acfg["tolerance"])
    return ws.path("attack.json")


def stage_report(ws: Workspace) -> list[Path]:
    """Join the stage artifacts into plot-ready tables."""
    report_dir = ws.path("report")
    report_dir.mkdir(exist_ok=True)
    outputs = []
    ks = sorted(ws.config["sets"]["k_values"])
    ls = sorted(ws.config["grid"]["bucket_sizes"])

    bounds_data = read_artifact(ws.path("bounds.json"), "bounds/1", ws.hash)
    rows = [[k] + [bounds_data["aggregate"][f"{k},{L}"] for L in ls]
            for k in ks]
    fig6 = report_dir / "fig6_bounds.csv"
    write_csv(fig6, ["k"] + [f"L{L}" for L in ls], rows)
    outputs.append(fig6)

    table2_rows = []
    savings_written = False
    for k, bucket_size in ws.config["simulate"]["pairs"]:
        path = ws.path(f"simulation_k{k}_L{bucket_size}.json")
        if not path.exists():
            continue
        sim = read_artifact(path, "simulation/1", ws.hash)
        overall = sim["aggregates"]["overall"]
        table2_rows.append([bucket_size, k,
                            100.0 * overall["global_total"],
                            100.0 * overall["adaptive_total"],
                            100.0 * (overall["global_total"]
                                     - overall["adaptive_total"])])
        if not savings_written:
            hist = sim["savings_histogram"]
            savings = report_dir / "savings_histogram.csv"
            write_csv(savings, ["bin_left", "bin_right", "count"],
                      [[hist["edges"][i], hist["edges"][i + 1],
                        hist["counts"][i]]
                       for i in range(len(hist["counts"]))])
            outputs.append(savings)
            savings_written = True
    table2 = report_dir / "table2_overheads.csv"
    write_csv(table2, ["L", "k", "global_total_pct", "adaptive_total_pct",
                       "reduction_pct"], table2_rows)
    outputs.append(table2)

    attack_path = ws.path("attack.json")
    if attack_path.exists():
        data = read_artifact(attack_path, "attack/1", ws.hash)
        table4 = report_dir / "table4_attack.csv"
        write_csv(table4,
                  ["rho_out", "rho_in", "bound_pct", "kfp_pct",
                   "oracle_pct", "population_bound_pct"],
                  [[c["rho_out"], c["rho_in"], 100.0 * c["theory_bound"],
                    100.0 * c["kfp_accuracy"], 100.0 * c["oracle_accuracy"],
                    100.0 * c["population_bound"]] for c in data["configs"]])
        outputs.append(table4)

    purity_src = ws.path("purity.csv")
    if purity_src.exists():
        dst = report_dir / "purity.csv"
        dst.write_bytes(purity_src.read_bytes())
        outputs.append(dst)
    return outputs
