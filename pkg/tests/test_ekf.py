"""Extended Kalman filter: updates, equivalence oracle, convergence."""

import numpy as np
import pytest

from retitherm.ekf import (EkfConfig, EkfState, correct, default_ekf_config,
                           predict, run_ekf, write_estimate_csv)
from retitherm.errors import ValidationError
from retitherm.plant import simulate_plant

from conftest import kalman_filter


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_rejects_nonpositive_r():
    with pytest.raises(ValidationError):
        EkfConfig(Q=np.eye(2), R=0.0, P0=np.eye(2), x0=np.zeros(2))


def test_config_rejects_asymmetric_q():
    Q = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        EkfConfig(Q=Q, R=1.0, P0=np.eye(2), x0=np.zeros(2))


def test_config_rejects_indefinite_p0():
    P0 = np.diag([1.0, -0.1])
    with pytest.raises(ValidationError):
        EkfConfig(Q=np.eye(2), R=1.0, P0=P0, x0=np.zeros(2))


def test_default_config_shapes(aug1, aug2, cfg):
    for model in (aug1, aug2):
        conf = default_ekf_config(model, cfg)
        assert conf.Q.shape == (model.dim, model.dim)
        assert conf.x0[model.n:] == pytest.approx(
            model.dm.rom.domain.midpoint[: model.p])


# ---------------------------------------------------------------------------
# single updates
# ---------------------------------------------------------------------------

def test_predict_from_origin_adds_process_noise(linear_model):
    P0 = np.diag([1.0, 2.0, 3.0])
    Q = 0.1 * np.eye(3)
    state = EkfState(xbar=np.zeros(3), P=P0)
    out = predict(linear_model, state, 0.0, Q)
    A = linear_model.A
    assert np.allclose(out.xbar, 0.0)
    assert np.allclose(out.P, A @ P0 @ A.T + Q, rtol=1e-14)


def test_correct_with_zero_innovation_keeps_estimate(linear_model):
    x = np.array([1.0, -0.5, 2.0])
    state = EkfState(xbar=x.copy(), P=np.eye(3))
    out = correct(linear_model, state, linear_model.g(x), 1.0)
    assert np.allclose(out.xbar, x)
    assert out.innovation == pytest.approx(0.0)


def test_correct_huge_r_changes_nothing(linear_model):
    state = EkfState(xbar=np.ones(3), P=np.eye(3))
    out = correct(linear_model, state, 5.0, 1e12)
    assert np.allclose(out.xbar, state.xbar, atol=1e-10)
    assert np.allclose(out.P, state.P, atol=1e-10)


def test_correct_matches_joseph_form(linear_model):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((3, 3))
    P = M @ M.T + np.eye(3)
    state = EkfState(xbar=rng.standard_normal(3), P=P)
    R = 0.7
    out = correct(linear_model, state, 1.3, R)
    c = linear_model.c
    K = out.gain
    J = np.eye(3) - np.outer(K, c)
    P_joseph = J @ P @ J.T + R * np.outer(K, K)
    assert np.abs(out.P - P_joseph).max() <= 1e-10


def test_parameter_variance_never_grows_without_process_noise(aug1, cfg):
    conf = default_ekf_config(aug1, cfg)
    Q = conf.Q.copy()
    Q[aug1.n:, aug1.n:] = 0.0
    state = EkfState(xbar=conf.x0.copy(), P=conf.P0.copy())
    prev = state.P[aug1.n, aug1.n]
    for k in range(40):
        state = predict(aug1, state, 0.03, Q)
        state = correct(aug1, state, 5.0 * k / 40, conf.R)
        cur = state.P[aug1.n, aug1.n]
        assert cur <= prev + 1e-12
        prev = cur


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def test_run_matches_kalman_filter_oracle(linear_model):
    rng = np.random.default_rng(1)
    K = 60
    u_seq = rng.uniform(0.0, 1.0, K)
    y_seq = rng.standard_normal(K + 1)
    Q = 0.05 * np.eye(3)
    R = 0.4
    P0 = np.diag([2.0, 1.0, 0.5])
    x0 = np.array([0.1, -0.2, 0.3])
    record = run_ekf(linear_model, EkfConfig(Q=Q, R=R, P0=P0, x0=x0),
                     u_seq, y_seq, store_covariances=True)
    traj, covs = kalman_filter(linear_model.A, linear_model.b, linear_model.c,
                               Q, R, P0, x0, u_seq, y_seq)
    assert np.abs(record.xbar - traj).max() <= 1e-10
    assert np.abs(record.P_hist - covs).max() <= 1e-10


def test_short_input_stream_rejected(linear_model):
    conf = EkfConfig(Q=np.eye(3), R=1.0, P0=np.eye(3), x0=np.zeros(3))
    with pytest.raises(ValidationError):
        run_ekf(linear_model, conf, np.zeros(3), np.zeros(10))


def test_covariance_stays_psd(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [0.9], 0.03, 0.288, 120, seed=4)
    conf = default_ekf_config(aug1, cfg)
    record = run_ekf(aug1, conf, trace.u[:-1], trace.y_noisy,
                     store_covariances=True)
    for P in record.P_hist:
        assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_noise_free_parameter_convergence(aug1, cfg, rom1):
    """With the estimator's own model as truth the prefactor is recovered."""
    trace = simulate_plant(rom1, [0.9], 0.03, 0.0, 150, seed=0)
    conf = default_ekf_config(aug1, cfg)
    record = run_ekf(aug1, conf, trace.u[:-1], trace.y_clean)
    assert abs(record.alpha_hat[-1, 0] - 0.9) <= 0.01 * 0.9
    # and the fitted output tracks the clean measurement
    assert abs(record.y_hat[-1] - trace.y_clean[-1]) \
        <= 1e-3 * abs(trace.y_clean[-1])


def test_larger_r_settles_slower(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [1.0], 0.03, 0.0, 120, seed=0)
    errs = {}
    for r in (1e2, 1e4):
        conf = default_ekf_config(aug1, cfg)
        conf.R = r
        record = run_ekf(aug1, conf, trace.u[:-1], trace.y_clean)
        errs[r] = np.abs(record.alpha_hat[20:60, 0] - 1.0).mean()
    assert errs[1e2] < errs[1e4]


def test_larger_initial_parameter_variance_moves_faster(aug1, cfg, rom1):
    trace = simulate_plant(rom1, [1.1], 0.03, 0.0, 60, seed=0)
    moved = {}
    for p_para in (50.0, 200.0):
        conf = default_ekf_config(aug1, cfg)
        conf.P0[aug1.n, aug1.n] = p_para
        record = run_ekf(aug1, conf, trace.u[:-1], trace.y_clean)
        moved[p_para] = abs(record.alpha_hat[10, 0] - conf.x0[aug1.n])
    assert moved[200.0] > moved[50.0]


def test_estimate_csv_layout(tmp_path, aug2, cfg, rom2):
    trace = simulate_plant(rom2, [0.8, 0.1], 0.03, 0.288, 25, seed=2)
    conf = default_ekf_config(aug2, cfg)
    record = run_ekf(aug2, conf, trace.u[:-1], trace.y_noisy)
    path = tmp_path / "estimate.csv"
    write_estimate_csv(path, record)
    lines = path.read_text().splitlines()
    assert lines[0] == ("k,t,u,y_meas,y_hat,T_peak_hat,"
                        "alpha_hat_1,alpha_hat_2,P_trace")
    assert len(lines) == 27
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[6]) == pytest.approx(record.alpha_hat[0, 0])
