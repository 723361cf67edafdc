"""Moving horizon estimator: NLS solver, Riccati weight, window runs."""

import numpy as np
import pytest
import scipy.linalg as la

from retitherm.ekf import EkfConfig, run_ekf
from retitherm.errors import SolverFailure, ValidationError
from retitherm.mhe import (MheConfig, NlsSettings, constant_prior_weight,
                           dare_fixed_point, default_mhe_config,
                           riccati_state_weight, run_mhe, solve_box_nls,
                           update_prior)
from retitherm.plant import simulate_plant

from conftest import kalman_filter


# ---------------------------------------------------------------------------
# box-constrained least squares
# ---------------------------------------------------------------------------

def test_nls_solves_quadratic_in_one_iteration():
    rng = np.random.default_rng(0)
    J = rng.standard_normal((8, 4))
    b = rng.standard_normal(8)
    result = solve_box_nls(lambda x: J @ x - b, lambda x: J,
                           np.zeros(4), np.full(4, -np.inf), np.full(4, np.inf))
    ref = la.lstsq(J, b)[0]
    assert result.iterations <= 2
    assert np.abs(result.x - ref).max() <= 1e-8
    assert result.kkt_residual <= 1e-8


def test_nls_respects_active_bounds():
    # unconstrained minimum at (2, -3); box forces both onto the boundary
    J = np.eye(2)
    b = np.array([2.0, -3.0])
    result = solve_box_nls(lambda x: J @ x - b, lambda x: J,
                           np.zeros(2), np.array([-1.0, -1.0]),
                           np.array([1.0, 1.0]))
    assert np.allclose(result.x, [1.0, -1.0])
    # the projected gradient vanishes at a bound-active optimum
    assert result.kkt_residual <= 1e-10


def test_nls_recovers_zero_residual_point():
    target = np.array([0.3, -0.7, 1.2])

    def resid(x):
        return np.array([(x[0] - target[0]) * (1 + x[1] ** 2),
                         x[1] - target[1],
                         (x[2] - target[2]) * np.cosh(x[0])])

    def jac(x):
        eps = 1e-7
        cols = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            cols.append((resid(x + e) - resid(x - e)) / (2 * eps))
        return np.column_stack(cols)

    result = solve_box_nls(resid, jac, np.zeros(3),
                           np.full(3, -5.0), np.full(3, 5.0))
    assert np.abs(result.x - target).max() <= 1e-8
    assert result.cost <= 1e-16


def test_nls_raises_on_non_finite_residual():
    def resid(x):
        return np.array([np.nan, 0.0])

    with pytest.raises(SolverFailure, match="component 0"):
        solve_box_nls(resid, lambda x: np.eye(2), np.zeros(2),
                      np.full(2, -1.0), np.full(2, 1.0))


def test_nls_clips_infeasible_start():
    J = np.eye(1)
    result = solve_box_nls(lambda x: J @ x, lambda x: J, np.array([10.0]),
                           np.array([0.5]), np.array([2.0]))
    assert result.x[0] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# stationary Riccati weight
# ---------------------------------------------------------------------------

def test_dare_scalar_closed_form():
    # p = a^2 p - a^2 p^2 / (p + r) + q with a=0.5, c=1, q=r=1
    # reduces to p^2 - 0.25 p - 1 = 0 on the positive branch
    p = dare_fixed_point(np.array([[0.5]]), np.array([1.0]),
                         np.array([[1.0]]), 1.0)
    expected = (0.25 + np.sqrt(0.0625 + 4.0)) / 2.0
    assert p[0, 0] == pytest.approx(expected, rel=1e-9)


def test_dare_zero_process_noise_gives_zero():
    p = dare_fixed_point(np.array([[0.5]]), np.array([1.0]),
                         np.array([[0.0]]), 1.0)
    assert p[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_riccati_weight_satisfies_fixed_point(aug1, cfg):
    dm = aug1.dm
    alpha_bar = np.array([0.7636])
    Q = 0.01 * np.eye(aug1.n)
    r = 1e3
    P = riccati_state_weight(dm, alpha_bar, Q, r)
    c = dm.c_vol(alpha_bar)
    Pc = P @ c
    res = dm.A_d @ (P - np.outer(Pc, Pc) / (float(c @ Pc) + r)) @ dm.A_d.T \
        + Q - P
    assert np.abs(res).max() <= 1e-8 * np.abs(P).max()


def test_constant_weight_block_structure(aug2, cfg):
    W = constant_prior_weight(aug2, np.array([0.76, 0.10]),
                              0.01 * np.eye(aug2.n), 1e3, [50.0, 20.0])
    n = aug2.n
    assert np.all(W[:n, n:] == 0)
    assert np.allclose(np.diag(W)[n:], [50.0, 20.0])
    assert np.linalg.eigvalsh(W).min() > 0


# ---------------------------------------------------------------------------
# configuration and prior policy
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValidationError):
        MheConfig(N=0, Q=np.eye(2), R=1.0, P0=np.eye(2), x0=np.zeros(2))
    with pytest.raises(ValidationError):
        MheConfig(N=5, Q=np.eye(2), R=1.0, P0=np.eye(2), x0=np.zeros(2),
                  prior_update="fancy")
    with pytest.raises(ValidationError):
        MheConfig(N=5, Q=np.eye(2), R=1.0, P0=np.eye(2), x0=np.zeros(2),
                  prior_weight="constant")


def test_default_config_uses_domain_bounds(aug2, cfg):
    conf = default_mhe_config(aug2, cfg)
    assert np.allclose(conf.lower, [0.3822, 0.0424])
    assert np.allclose(conf.upper, [1.1451, 0.1548])
    off = default_mhe_config(aug2, cfg, constrained=False)
    assert off.lower is None and off.upper is None


def test_startup_prior_is_initial_pair(aug1, cfg):
    conf = default_mhe_config(aug1, cfg)
    chi, P = update_prior(0, aug1, conf, np.zeros((1, aug1.dim)), None, 0,
                          np.zeros(1), None)
    assert np.array_equal(chi, conf.x0)
    assert np.array_equal(P, conf.P0)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("N", [1, 5, 20])
def test_unconstrained_mhe_matches_kalman_filter(linear_model, N):
    """On a linear model without bounds, every window refit reproduces
    the Kalman filter estimate exactly."""
    rng = np.random.default_rng(2)
    K = 45
    u_seq = rng.uniform(0.0, 1.0, K)
    y_seq = rng.standard_normal(K + 1)
    Q = 0.05 * np.eye(3)
    R = 0.4
    P0 = np.diag([2.0, 1.0, 0.5])
    x0 = np.array([0.1, -0.2, 0.3])
    conf = MheConfig(N=N, Q=Q, R=R, P0=P0, x0=x0)
    record = run_mhe(linear_model, conf, u_seq, y_seq)
    traj, _ = kalman_filter(linear_model.A, linear_model.b, linear_model.c,
                            Q, R, P0, x0, u_seq, y_seq)
    assert np.abs(record.xbar - traj).max() <= 1e-6
    assert np.all(record.solver_iters[1:] >= 1)


def test_bounds_hold_at_every_step(aug2, cfg, rom2):
    trace = simulate_plant(rom2, [0.45, 0.05], 0.03, 0.288, 80, seed=5)
    conf = default_mhe_config(aug2, cfg)
    record = run_mhe(aug2, conf, trace.u[:-1], trace.y_noisy)
    alpha = record.alpha_hat
    assert np.all(alpha >= conf.lower - 1e-12)
    assert np.all(alpha <= conf.upper + 1e-12)
    # a spot this close to the floor should pin the lower bound early on
    assert record.active_lb.any()


def test_rerun_is_bit_identical(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [0.9], 0.03, 0.288, 60, seed=6)
    conf = default_mhe_config(aug1, cfg)
    a = run_mhe(aug1, conf, trace.u[:-1], trace.y_noisy)
    b = run_mhe(aug1, conf, trace.u[:-1], trace.y_noisy)
    assert np.array_equal(a.xbar, b.xbar)
    assert np.array_equal(a.kkt_residual, b.kkt_residual)


def test_latest_only_misfit_variant_runs(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [0.9], 0.03, 0.0, 60, seed=0)
    conf = default_mhe_config(aug1, cfg)
    conf.output_misfit = "latest_only"
    record = run_mhe(aug1, conf, trace.u[:-1], trace.y_clean)
    assert abs(record.alpha_hat[-1, 0] - 0.9) <= 0.05 * 0.9


def test_smoothing_prior_variant_converges(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [0.9], 0.03, 0.0, 100, seed=0)
    conf = default_mhe_config(aug1, cfg)
    conf.prior_update = "smoothing"
    record = run_mhe(aug1, conf, trace.u[:-1], trace.y_clean)
    assert abs(record.alpha_hat[-1, 0] - 0.9) <= 0.02 * 0.9


def test_solver_failure_falls_back_and_recovers(aug1, cfg, rom1):
    """A NaN measurement poisons windows that contain it; the estimator
    flags those steps and resumes once the window has moved past."""
    trace = simulate_plant(rom1, [0.9], 0.03, 0.0, 60, seed=0)
    y = trace.y_clean.copy()
    y[30] = np.nan
    conf = default_mhe_config(aug1, cfg)
    conf.prior_weight = "constant"
    conf.constant_weight = constant_prior_weight(
        aug1, np.array([0.7636]), conf.Q[: aug1.n, : aug1.n], conf.R, [50.0])
    record = run_mhe(aug1, conf, trace.u[:-1], y)
    poisoned = record.solver_iters[30: 30 + conf.N + 1]
    assert np.all(poisoned == -1)
    assert np.all(np.isinf(record.kkt_residual[30: 30 + conf.N + 1]))
    assert np.all(record.solver_iters[30 + conf.N + 1:] >= 1)
    assert abs(record.alpha_hat[-1, 0] - 0.9) <= 0.05 * 0.9


def test_noise_free_parameter_convergence(aug2, cfg, rom2):
    trace = simulate_plant(rom2, [0.9, 0.12], 0.03, 0.0, 150, seed=0)
    conf = default_mhe_config(aug2, cfg)
    record = run_mhe(aug2, conf, trace.u[:-1], trace.y_clean)
    assert abs(record.alpha_hat[-1, 0] - 0.9) <= 0.02 * 0.9
    assert np.all(record.kkt_residual[1:] <= 1e-6)
