"""Workspace artifact I/O: deterministic JSON/CSV plus model containers.

Every artifact embeds the hash of the configuration that produced it;
readers compare hashes and abort on mismatch rather than silently mixing
runs.  All writers are byte-deterministic: sorted keys, repr float
formatting, no timestamps.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .detector import (CentroidSitePredictor, DetectorConfig, PatternBank,
                       TwoStageDetector, FULL_TRACE)
from .errors import ConfigMismatchError, MissingArtifactError
from .kfp import ForestConfig, LeafFingerprintClassifier

ARTIFACT_VERSION = 1


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def write_artifact(path: Path, kind: str, cfg_hash: str, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": kind, "version": ARTIFACT_VERSION,
               "config_hash": cfg_hash, "data": data}
    path.write_text(canonical_json(payload) + "\n")


def read_artifact(path: Path, kind: str, cfg_hash: str | None = None) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run the producing stage first")
    payload = json.loads(path.read_text())
    if payload.get("format") != kind:
        raise ConfigMismatchError(
            f"{path}: expected artifact {kind!r}, found {payload.get('format')!r}")
    if cfg_hash is not None and payload.get("config_hash") != cfg_hash:
        raise ConfigMismatchError(
            f"{path}: produced under config {payload.get('config_hash')}, "
            f"current config is {cfg_hash}; refusing to mix runs")
    return payload["data"]


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str],
              rows: Sequence[Sequence[Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def encode_float(value: float) -> Any:
    """JSON-safe float: infinities become null (used for safe times)."""
    if value is None or math.isinf(value):
        return None
    return value


def decode_float(value: Any) -> float:
    return math.inf if value is None else float(value)


# -- detector container ----------------------------------------------------
# Directory layout: meta.json sidecar, centroids.npz for Stage A, and one
# pickled forest per (site, checkpoint) under kfp/.

def _checkpoint_tag(checkpoints: Sequence[float], cp: float) -> str:
    if cp == FULL_TRACE:
        return "full"
    return f"cp{list(checkpoints).index(cp)}"


def save_detector(detector: TwoStageDetector, out_dir: Path,
                  cfg_hash: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = detector.config
    site_predictor = detector.site_predictor
    if not isinstance(site_predictor, CentroidSitePredictor):
        raise ValueError("only centroid site predictors are persistable; "
                         "external predictors are configured at run time")
    checkpoints = list(config.checkpoints)
    arrays = {"sites": np.asarray(site_predictor.site_ids, dtype=np.int64)}
    for cp, bank in site_predictor.banks.items():
        arrays[_checkpoint_tag(checkpoints, cp)] = bank
    np.savez(out_dir / "centroids.npz", **arrays)
    kfp_dir = out_dir / "kfp"
    kfp_dir.mkdir(exist_ok=True)
    model_index = []
    fallbacks = {}
    for site in sorted(detector.banks):
        bank = detector.banks[site]
        if bank.fallback is not None:
            fallbacks[str(site)] = bank.fallback
            continue
        for cp in sorted(bank.models):
            tag = _checkpoint_tag(checkpoints, cp)
            name = f"site{site}_{tag}.bin"
            (kfp_dir / name).write_bytes(bank.models[cp].to_bytes())
            model_index.append([site, tag, name])
    meta = {
        "format": "detector/1",
        "config_hash": cfg_hash,
        "alpha": config.alpha,
        "checkpoints": checkpoints,
        "slot_width": config.slot_width,
        "n_slots": config.n_slots,
        "forest": [config.forest.n_trees, config.forest.max_depth,
                   config.forest.k_nn],
        "set_map": [[site, pattern, set_id]
                    for (site, pattern), set_id in sorted(detector.set_map.items())],
        "fallbacks": fallbacks,
        "models": model_index,
    }
    (out_dir / "meta.json").write_text(canonical_json(meta) + "\n")


def load_detector(in_dir: Path, cfg_hash: str | None = None) -> TwoStageDetector:
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.json"
    if not meta_path.exists():
        raise MissingArtifactError(f"no detector at {in_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "detector/1":
        raise ConfigMismatchError(f"{in_dir}: unsupported detector container "
                                  f"{meta.get('format')!r}")
    if cfg_hash is not None and meta.get("config_hash") != cfg_hash:
        raise ConfigMismatchError(f"{in_dir}: detector trained under config "
                                  f"{meta.get('config_hash')}, current is {cfg_hash}")
    checkpoints = [float(c) for c in meta["checkpoints"]]
    forest = ForestConfig(*meta["forest"])
    config = DetectorConfig(alpha=meta["alpha"], checkpoints=tuple(checkpoints),
                            slot_width=meta["slot_width"],
                            n_slots=meta["n_slots"], forest=forest)
    site_predictor = CentroidSitePredictor(config.slot_width, config.n_slots)
    with np.load(in_dir / "centroids.npz") as arrays:
        site_predictor.site_ids = [int(s) for s in arrays["sites"]]
        for idx, cp in enumerate(checkpoints):
            site_predictor.banks[cp] = arrays[f"cp{idx}"]
        site_predictor.banks[FULL_TRACE] = arrays["full"]
    banks: dict[int, PatternBank] = {}
    for site, tag, name in meta["models"]:
        cp = FULL_TRACE if tag == "full" else checkpoints[int(tag[2:])]
        bank = banks.setdefault(int(site), PatternBank(int(site)))
        blob = (in_dir / "kfp" / name).read_bytes()
        bank.models[cp] = LeafFingerprintClassifier.from_bytes(blob)
    for site_str, pattern in meta["fallbacks"].items():
        banks[int(site_str)] = PatternBank(int(site_str), fallback=int(pattern))
    set_map = {(int(s), int(p)): int(sid) for s, p, sid in meta["set_map"]}
    missing = {site for site, _ in set_map} - set(banks)
    if missing:
        raise ConfigMismatchError(
            f"{in_dir}: sites {sorted(missing)} appear in the set map but "
            "have neither models nor a fallback")
    return TwoStageDetector(site_predictor, banks, set_map, config)
