"""Closed-world attacker on defended traces, checked against the bound.

The attacker is the same leaf-fingerprint forest used for pattern
prediction, retrained on site labels over full defended cell sequences
(dummies included: the attacker sees every cell, only times and directions).
Alongside it runs the exact bucket-majority oracle: group the evaluation
traces by identical observable sequences and guess each group's majority
site.  No deterministic classifier can beat the oracle on the same traces,
and the oracle equals the trace-weighted inverse pre-image size by
construction, so `kfp <= bound + noise` and `oracle <= bound` are the two
alarms that fire when a schedule leaks.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import weighted_delta
from .errors import BoundViolationError
from .kfp import ForestConfig, LeafFingerprintClassifier, extract_features
from .tamaraw import DefendedTrace, TamarawParams

#: Allowance for train/test sampling noise when comparing kFP to the bound.
DEFAULT_TOLERANCE = 0.03


@dataclass
class AttackOutcome:
    params: TamarawParams
    accuracy: float
    n_test: int
    confusion: dict[tuple[int, int], int] = field(default_factory=dict)


@dataclass
class AttackReport:
    outcomes: list[AttackOutcome]

    def accuracies(self) -> list[float]:
        return [o.accuracy for o in self.outcomes]


def _features(defended: Sequence[DefendedTrace]) -> np.ndarray:
    return np.stack([extract_features(d.times, d.directions)
                     for d in defended])


def closed_world_attack(train_defended: Sequence[DefendedTrace],
                        train_sites: Sequence[int],
                        test_defended: Sequence[DefendedTrace],
                        test_sites: Sequence[int],
                        params: TamarawParams,
                        forest: ForestConfig = ForestConfig(),
                        seed: int = 0) -> AttackOutcome:
    """Train the leaf-fingerprint attacker on defended traces, report test
    accuracy and the confusion counts."""
    if not train_defended or not test_defended:
        raise ValueError("both splits must be non-empty")
    if len(set(train_sites)) < 2:
        raise ValueError("attack needs at least two sites in training data")
    model = LeafFingerprintClassifier(forest, seed)
    model.fit(_features(train_defended), np.asarray(train_sites))
    predictions = model.predict(_features(test_defended))
    confusion: dict[tuple[int, int], int] = {}
    hits = 0
    for true, pred in zip(test_sites, predictions):
        confusion[(int(true), int(pred))] = confusion.get(
            (int(true), int(pred)), 0) + 1
        hits += int(true == pred)
    return AttackOutcome(params, hits / len(test_sites), len(test_sites),
                         confusion)


def observable_buckets(defended: Sequence[DefendedTrace],
                       sites: Sequence[int]) -> dict[bytes, list[int]]:
    """Group traces whose defended sequences are byte-identical."""
    buckets: dict[bytes, list[int]] = {}
    for d, site in zip(defended, sites):
        buckets.setdefault(d.observable(), []).append(int(site))
    return buckets


def bucket_majority_accuracy(defended: Sequence[DefendedTrace],
                             sites: Sequence[int]) -> float:
    """Best achievable accuracy of any classifier of the observable."""
    buckets = observable_buckets(defended, sites)
    total = sum(max(Counter(members).values())
                for members in buckets.values())
    return total / len(sites)


def population_bound(defended: Sequence[DefendedTrace],
                     sites: Sequence[int]) -> float:
    """Trace-weighted inverse pre-image size over observable buckets.

    Evaluated on the given population this coincides with
    bucket_majority_accuracy, but it goes through weighted_delta so the two
    stay independent checks of each other.
    """
    buckets = observable_buckets(defended, sites)
    n = len(sites)
    return sum(len(members) / n / weighted_delta(members)
               for members in buckets.values())


@dataclass
class ComparisonRow:
    params: TamarawParams
    bound: float
    kfp_accuracy: float
    oracle_accuracy: float
    passed: bool
    detail: str = ""


def compare_with_bound(outcomes: Sequence[AttackOutcome],
                       bounds: Sequence[float],
                       oracle_accuracies: Sequence[float] | None = None,
                       tolerance: float = DEFAULT_TOLERANCE,
                       raise_on_violation: bool = True,
                       ) -> list[ComparisonRow]:
    """Assert kfp <= bound + tolerance per configuration.

    A violation is the pipeline's primary correctness alarm: it is reported
    with the full confusion table and, by default, raised.
    """
    if len(outcomes) != len(bounds):
        raise ValueError("outcome/bound lists must align")
    rows = []
    for i, (outcome, bound) in enumerate(zip(outcomes, bounds)):
        oracle = (oracle_accuracies[i]
                  if oracle_accuracies is not None else float("nan"))
        ok = outcome.accuracy <= bound + tolerance
        detail = ""
        if not ok:
            worst = sorted(outcome.confusion.items(),
                           key=lambda kv: -kv[1])[:10]
            detail = (f"kfp accuracy {outcome.accuracy:.4f} exceeds bound "
                      f"{bound:.4f} + {tolerance}; top confusion cells "
                      f"{worst}")
        rows.append(ComparisonRow(outcome.params, bound, outcome.accuracy,
                                  oracle, ok, detail))
    violations = [r for r in rows if not r.passed]
    if violations and raise_on_violation:
        raise BoundViolationError("; ".join(r.detail for r in violations))
    return rows
