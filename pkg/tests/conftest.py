"""Shared fixtures: models are built once per session (the expensive part)."""

import numpy as np
import pytest

from retitherm.config import default_config
from retitherm.plant import augment, discretize
from retitherm.pmor import build_rom
from retitherm.thermal import build_full_model


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def full_model(cfg):
    return build_full_model(cfg)


@pytest.fixture(scope="session")
def coarse_model():
    cfg = default_config()
    cfg["geometry"]["n_r"] = 16
    cfg["geometry"]["n_z"] = 36
    return build_full_model(cfg)


@pytest.fixture(scope="session")
def rom1(full_model, cfg):
    return build_rom(full_model, 1, cfg)


@pytest.fixture(scope="session")
def rom2(full_model, cfg):
    return build_rom(full_model, 2, cfg)


@pytest.fixture(scope="session")
def aug1(rom1, cfg):
    return augment(discretize(rom1, cfg["sampling"]["t_s"]), 1)


@pytest.fixture(scope="session")
def aug2(rom2, cfg):
    return augment(discretize(rom2, cfg["sampling"]["t_s"]), 2)


class LinearModel:
    """A linear fixed-parameter system with the estimator model interface."""

    def __init__(self, A, b, c, t_s=0.001):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.n = self.A.shape[0]
        self.p = 0
        self.dim = self.n
        self.t_s = t_s

    def f(self, x, u):
        return self.A @ x + self.b * u

    def f_jac(self, x, u):
        return self.A

    def g(self, x):
        return float(self.c @ x)

    def g_jac(self, x):
        return self.c

    def t_peak(self, x):
        return 0.0


@pytest.fixture
def linear_model():
    A = np.array([[0.9, 0.1, 0.0], [0.0, 0.8, 0.05], [0.02, 0.0, 0.7]])
    b = np.array([1.0, 0.5, 0.2])
    c = np.array([1.0, 0.3, 0.1])
    return LinearModel(A, b, c)


def kalman_filter(A, b, c, Q, R, P0, x0, u_seq, y_seq):
    """Textbook Kalman filter, used as the equivalence oracle."""
    x = np.asarray(x0, dtype=float).copy()
    P = np.asarray(P0, dtype=float).copy()
    traj = [x.copy()]
    covs = [P.copy()]
    for k in range(1, len(y_seq)):
        x = A @ x + b * u_seq[k - 1]
        P = A @ P @ A.T + Q
        s = float(c @ P @ c) + R
        gain = P @ c / s
        x = x + gain * (y_seq[k] - float(c @ x))
        P = P - np.outer(gain, c @ P)
        P = 0.5 * (P + P.T)
        traj.append(x.copy())
        covs.append(P.copy())
    return np.array(traj), np.array(covs)
