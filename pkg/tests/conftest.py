import numpy as np
import pytest

from otflow.grids import ImageGrid, NormalizedMeasure, normalize


def make_gaussian_measure(h, w, center, sigma):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    v = np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2.0 * sigma**2))
    return normalize(ImageGrid(v))


def make_onehot_measure(h, w, pixel):
    v = np.zeros((h, w))
    v[pixel] = 1.0
    return NormalizedMeasure(ImageGrid(v))


def central_difference(fn, x, h=1e-5):
    """Dense central-difference gradient of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
