import sys

import numpy as np
import pytest

from ttdfusion.codec import CodecSpec, init_params
from ttdfusion.rng import CounterRNG


@pytest.fixture
def rng():
    return CounterRNG(1234, stream=99)


@pytest.fixture
def small_net():
    spec = CodecSpec("toynet", features=2, kernel=3)
    return spec, init_params(spec, seed=7)


def random_image(seed, h=8, w=8, c=1):
    return CounterRNG(seed, stream=55).uniform((h, w, c))


@pytest.fixture
def image_factory():
    return random_image


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])


np.set_printoptions(precision=6, suppress=True)
