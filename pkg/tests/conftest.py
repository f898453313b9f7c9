import numpy as np
import pytest

from kvx2l.chunking import VideoTokens
from kvx2l.engine import Engine, EngineConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def averaging_engine():
    return Engine(EngineConfig(layers=2, heads=2, head_dim=4, vocab=16, seed=3, mode="averaging"))


@pytest.fixture(scope="session")
def seeded_engine():
    return Engine(EngineConfig(layers=2, heads=2, head_dim=4, vocab=16, seed=7, mode="seeded-random"))


@pytest.fixture(scope="session")
def niah_engine():
    """Averaging backbone sized for needle retrieval."""
    return Engine(EngineConfig(layers=2, heads=4, head_dim=32, vocab=64, seed=0, mode="averaging"))


@pytest.fixture
def make_tokens():
    def factory(n, dim, seed=0, tokens_per_frame=1):
        values = np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32)
        return VideoTokens(values, tokens_per_frame)

    return factory
