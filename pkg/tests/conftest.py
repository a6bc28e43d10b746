import numpy as np
import pytest

from orthotrain.linalg import RngState, rand_gaussian


@pytest.fixture
def rng():
    return RngState(seed=20240601)


def gaussian(n, m=None, seed=0, std=1.0):
    return rand_gaussian(n, n if m is None else m, 0.0, std, RngState(seed))


def ill_conditioned(n, cond, seed=0):
    """Random ``n x n`` matrix with singular values spread log-uniformly over ``[1/cond, 1]``."""
    g = np.random.default_rng(seed)
    q1, _ = np.linalg.qr(g.standard_normal((n, n)))
    q2, _ = np.linalg.qr(g.standard_normal((n, n)))
    return q1 @ np.diag(np.logspace(0, -np.log10(cond), n)) @ q2.T
