import numpy as np
import pytest
from hypothesis import settings

from bitstash.analyzer import load_model_spec
from bitstash.data import SyntheticDataset

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

# criterion lines collected by test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desknet_spec():
    return load_model_spec("desknet")


@pytest.fixture(scope="session")
def synthetic_data():
    ds = SyntheticDataset(seed=0, num_samples=512)
    x, y = ds.generate("train")
    xt, yt = ds.generate("test")
    return x, y, xt, yt


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def bits(a):
    """Raw bytes of an array, for bit-exact comparisons."""
    return np.ascontiguousarray(a).tobytes()
