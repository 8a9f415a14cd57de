import numpy as np
import pytest

from mapfold.prior import BackboneChain, build_prior, unwhiten


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def prior8():
    return build_prior(8)


@pytest.fixture
def chain8(prior8, rng):
    return BackboneChain.from_coords(
        unwhiten(prior8, rng.standard_normal((prior8.dim, 3))))


def dense_decay_matrix(n, a, b):
    """Entry-by-entry oracle for the coupling matrix, double loop."""
    nu = 1.0 / np.sqrt(1.0 - b * b) if b > 0 else 1.0
    R = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            R[i, j] = a * nu * b**i if j == 0 else a * b ** (i - j)
    return R
