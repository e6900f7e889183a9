import numpy as np
import pytest

from edm2d.rngstreams import stream


@pytest.fixture
def rng():
    return stream(12345, "tests")


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def field_central_diff(f, x, v, h=1e-5):
    """(f(x + h v) - f(x - h v)) / 2h for a vector-valued f."""
    return (np.asarray(f(x + h * v)) - np.asarray(f(x - h * v))) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return np.abs(a - b).max() / denom
