import numpy as np
import pytest

from smds.model import MultiscaleSeries, RegimeParams, SwitchingModel
from smds.simulate import SimConfig, make_rng, random_switching_model, simulate_series


def small_config(**kw):
    base = dict(d=4, C=6, F=5, M=2, T_train=300, T_test=300, shared_mode_pairs=1,
                spike_only_pairs=1, field_only_pairs=0)
    base.update(kw)
    return SimConfig(**base)


def gaussian_model(rng, M=2, d=3, F=4, stay=0.95):
    """Random linear-Gaussian switching model with no neurons."""
    regimes = []
    for _ in range(M):
        A = 0.9 * np.linalg.qr(rng.standard_normal((d, d)))[0]
        L = rng.standard_normal((d, d)) * 0.3
        Q = L @ L.T + 0.05 * np.eye(d)
        C = rng.standard_normal((F, d))
        Lr = rng.standard_normal((F, F)) * 0.3
        R = Lr @ Lr.T + 0.2 * np.eye(F)
        regimes.append(RegimeParams(A=A, Q=Q, alpha=np.zeros(0), beta=np.zeros((0, d)), C=C, R=R))
    Phi = np.full((M, M), (1 - stay) / max(M - 1, 1)) if M > 1 else np.ones((1, 1))
    np.fill_diagonal(Phi, stay if M > 1 else 1.0)
    return SwitchingModel(regimes=regimes, Phi=Phi, pi0=np.full(M, 1 / M), mu0=rng.standard_normal(d),
                          Lambda0=np.eye(d) * 0.5)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="module")
def switching_system():
    cfg = small_config()
    r = make_rng(7)
    model = random_switching_model(cfg, r)
    series = simulate_series(model, 400, r)
    return model, series


def series_from(model, T, seed, **kw):
    return simulate_series(model, T, make_rng(seed), **kw)


__all__ = ["small_config", "gaussian_model", "series_from", "MultiscaleSeries"]
