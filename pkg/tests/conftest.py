import numpy as np
import pytest

from ppgvit import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend, restoring the previous choice."""
    prev = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sine(freq_hz, fs=40.0, n=1200, phase=0.0):
    t = np.arange(n) / fs
    return np.sin(2 * np.pi * freq_hz * t + phase)
