import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gfom_coupling import LinearCaseSpec, RngStream, Separable
from gfom_coupling.functions import ones

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def tanh_amp_f(n, T):
    """f_0 = 1, f_t = tanh(x_{t-1})."""
    return [ones(n)] + [Separable("tanh", {t - 1: 1.0}) for t in range(1, T)]


def linear_spec(n, T, lam=0.5, seed=5, orthonormal=False):
    G = RngStream(seed).generator().standard_normal((n, T))
    if orthonormal:
        Q, R = np.linalg.qr(G)
        G = np.sqrt(n) * Q * np.sign(np.diag(R))
    Lam = np.diag(np.full(T - 1, lam), 1) if T > 1 else np.zeros((1, 1))
    return LinearCaseSpec(G, Lam, Lam)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
