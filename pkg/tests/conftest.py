import numpy as np
import pytest

from vbmix.gaussian import GaussWishartParams
from vbmix.volume import MultiChannelVolume


def random_spd(rng, M, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((M, M)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), M))
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def random_gw(rng, M, nu_extra=5.0):
    mu = rng.normal(0.0, 2.0, M)
    b = rng.uniform(0.5, 20.0)
    nu = M - 1 + rng.uniform(1.0, nu_extra + 1.0)
    V = random_spd(rng, M) / nu
    return GaussWishartParams(mu, b, V, nu)


def random_volume(rng, dims, M, K=3, p_missing=0.3, empty_rows=True):
    """Mixture-like data with random missing entries; some rows fully missing."""
    D = int(np.prod(dims))
    centres = rng.normal(0.0, 3.0, (K, M))
    labels = rng.integers(0, K, D)
    data = centres[labels] + rng.standard_normal((D, M))
    mask = rng.random((D, M)) < p_missing
    if not empty_rows:
        full = mask.all(axis=1)
        mask[full, rng.integers(0, M, full.sum())] = False
    data[mask] = np.nan
    if not np.isfinite(data).any():
        data[0, 0] = 0.0
    return MultiChannelVolume(tuple(dims), data)


class Model:
    """Minimal duck-typed model for fit_subject."""

    def __init__(self, hyper, template):
        self.hyper = tuple(hyper)
        self.template = template


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
