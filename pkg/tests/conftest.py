import numpy as np
import pytest

from adaptive_tamaraw.synth import SynthConfig, generate_corpus
from adaptive_tamaraw.trace import Trace


def random_trace(rng: np.random.Generator, max_packets: int = 40,
                 site_id: int = 0, instance_id: int = 0,
                 duration: float = 4.0) -> Trace:
    n = int(rng.integers(1, max_packets + 1))
    times = np.sort(rng.uniform(0.0, duration, size=n))
    directions = rng.choice([1, -1], size=n).astype(np.int8)
    return Trace(times, directions, site_id, instance_id)


@pytest.fixture(scope="session")
def small_corpus():
    """8 sites x 16 traces; enough structure for pipeline-level tests."""
    return generate_corpus(SynthConfig(n_sites=8, traces_per_site=16,
                                       seed=20240601))


@pytest.fixture(scope="session")
def full_corpus():
    """The desk-scale corpus the acceptance criteria talk about."""
    return generate_corpus(SynthConfig(seed=1337))
