import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_jacobian(f, x0, boxplus, dim, eps=1e-6):
    """Central differences of vector function f along ``boxplus(x0, eps*e_i)``."""
    cols = []
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = eps
        cols.append((np.asarray(f(boxplus(x0, d))) - np.asarray(f(boxplus(x0, -d)))) / (2 * eps))
    return np.stack(cols, axis=-1)


def rel_err(A, B):
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-9))
