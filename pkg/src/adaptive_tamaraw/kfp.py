"""Leaf-fingerprint random-forest classifier over hand-crafted trace features.

A 100-tree random forest is fit on summary statistics of a (possibly
truncated) cell sequence.  Classification does not use the forest's own
vote: each example is mapped to the vector of leaf identifiers it reaches
(one per tree), and a query is labeled by the majority among its k nearest
training fingerprints under Hamming distance.  The same machinery serves two
places: per-site pattern prediction inside the switching detector, and the
closed-world attacker used to validate the theoretical bound.

Feature vector (this is the definitive layout; tests pin it):

====  ==========================================================
 0    outgoing cell count
 1    incoming cell count
 2    total cell count
 3    incoming/outgoing count ratio (0 when no outgoing cells)
 4    duration: last minus first timestamp (0 for < 2 cells)
 5-8  outgoing inter-arrival mean / std / min / max (0 for < 2)
 9-12 incoming inter-arrival mean / std / min / max (0 for < 2)
13-14 outgoing / incoming counts among the first 30 cells
15-16 outgoing / incoming counts among the last 30 cells
17-25 cumulative direction sum sampled at the 10%..90% deciles
====  ==========================================================

Standard deviations are population (ddof=0).  An empty input maps to the
all-zero vector.
"""

from __future__ import annotations

import pickle
from collections import Counter
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier

N_FEATURES = 26

#: Forest shape; the fingerprint length equals the tree count.
DEFAULT_TREES = 100
DEFAULT_MAX_DEPTH = 16
DEFAULT_K_NN = 3

_EDGE_WINDOW = 30
_DECILES = np.arange(0.1, 1.0, 0.1)


def extract_features(times: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Fixed-length feature vector for one (prefix of a) cell sequence."""
    features = np.zeros(N_FEATURES)
    n = times.size
    if n == 0:
        return features
    out_mask = directions > 0
    n_out = int(out_mask.sum())
    n_in = n - n_out
    features[0] = n_out
    features[1] = n_in
    features[2] = n
    features[3] = n_in / n_out if n_out > 0 else 0.0
    features[4] = times[-1] - times[0] if n > 1 else 0.0
    for base, mask in ((5, out_mask), (9, ~out_mask)):
        dir_times = times[mask]
        if dir_times.size >= 2:
            gaps = np.diff(dir_times)
            features[base:base + 4] = (gaps.mean(), gaps.std(),
                                       gaps.min(), gaps.max())
    head = directions[:_EDGE_WINDOW]
    tail = directions[-_EDGE_WINDOW:]
    features[13] = int((head > 0).sum())
    features[14] = int((head < 0).sum())
    features[15] = int((tail > 0).sum())
    features[16] = int((tail < 0).sum())
    cumulative = np.cumsum(directions)
    positions = np.minimum(np.ceil(_DECILES * n).astype(int), n) - 1
    positions = np.maximum(positions, 0)
    features[17:26] = cumulative[positions]
    return features


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = DEFAULT_TREES
    max_depth: int = DEFAULT_MAX_DEPTH
    k_nn: int = DEFAULT_K_NN


class LeafFingerprintClassifier:
    """Random forest + Hamming k-NN over leaf-identifier vectors."""

    def __init__(self, config: ForestConfig = ForestConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self._forest: RandomForestClassifier | None = None
        self._fingerprints: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise RuntimeError("classifier is not fitted")
        return self._labels

    def fit(self, features: np.ndarray, labels: np.ndarray,
            ) -> "LeafFingerprintClassifier":
        if features.shape[0] != labels.shape[0] or features.shape[0] == 0:
            raise ValueError("features and labels must align and be non-empty")
        if np.unique(labels).size < 2:
            raise ValueError("need at least two classes to fit")
        self._forest = RandomForestClassifier(
            n_estimators=self.config.n_trees,
            max_depth=self.config.max_depth,
            max_features="sqrt",
            bootstrap=True,
            random_state=self.seed,
            n_jobs=1,
        )
        self._forest.fit(features, labels)
        self._fingerprints = self._forest.apply(features).astype(np.int32)
        self._labels = np.asarray(labels).copy()
        return self

    def fingerprint(self, features: np.ndarray) -> np.ndarray:
        if self._forest is None:
            raise RuntimeError("classifier is not fitted")
        return self._forest.apply(np.atleast_2d(features)).astype(np.int32)

    def predict_one(self, feature_row: np.ndarray) -> int:
        """Majority label among the k nearest training fingerprints.

        Nearness is Hamming distance over leaf vectors; distance ties keep
        the earlier training example, label ties take the lowest label.
        """
        fp = self.fingerprint(feature_row)[0]
        distances = (self._fingerprints != fp).sum(axis=1)
        order = np.argsort(distances, kind="stable")
        k = min(self.config.k_nn, order.size)
        votes = Counter(int(self._labels[i]) for i in order[:k])
        top = max(votes.values())
        return min(lab for lab, cnt in votes.items() if cnt == top)

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        return np.array([self.predict_one(row) for row in features],
                        dtype=np.int64)

    # -- serialization ----------------------------------------------------
    # Pickled sklearn forests are byte-stable for identical fits, which the
    # workspace determinism guarantee relies on.

    def to_bytes(self) -> bytes:
        if self._forest is None:
            raise RuntimeError("classifier is not fitted")
        payload = {
            "version": 1,
            "config": (self.config.n_trees, self.config.max_depth,
                       self.config.k_nn),
            "seed": self.seed,
            "forest": self._forest,
            "fingerprints": self._fingerprints,
            "labels": self._labels,
        }
        return pickle.dumps(payload, protocol=4)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LeafFingerprintClassifier":
        payload = pickle.loads(blob)
        if payload.get("version") != 1:
            raise ValueError(f"unsupported model version {payload.get('version')!r}")
        n_trees, max_depth, k_nn = payload["config"]
        model = cls(ForestConfig(n_trees, max_depth, k_nn), payload["seed"])
        model._forest = payload["forest"]
        model._fingerprints = payload["fingerprints"]
        model._labels = payload["labels"]
        return model
