"""Extended Kalman filter for the parameter-augmented discrete model.

The filter alternates a prediction through the augmented transition f
and a scalar-measurement correction of the volume temperature.  The
covariance is symmetrized after every update; with a scalar output the
gain needs a division, never a matrix inverse.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SolverFailure, ValidationError
from .plant import AugmentedDiscreteModel


@dataclass
class EkfConfig:
    """Tuning matrices and initial condition of the augmented filter."""

    Q: np.ndarray        # (n+p, n+p) process covariance
    R: float             # scalar measurement variance weight
    P0: np.ndarray       # (n+p, n+p) initial covariance
    x0: np.ndarray       # (n+p,) initial extended state

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.P0 = np.asarray(self.P0, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.R <= 0:
            raise ValidationError(f"measurement weight R must be positive, got {self.R}")
        for name, M in (("Q", self.Q), ("P0", self.P0)):
            if not np.allclose(M, M.T):
                raise ValidationError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(M) < -1e-12):
                raise ValidationError(f"{name} must be positive semidefinite")


def default_ekf_config(model: AugmentedDiscreteModel, cfg: dict,
                       alpha0=None) -> EkfConfig:
    """Build the default tuning for a 1p or 2p augmented model."""
    ek = cfg["ekf"]
    n, p = model.n, model.p
    q = np.full(n + p, ek["q_diag"])
    if p == 2:
        q[n:] = ek["q_para_2p"]
    p0 = np.full(n + p, ek["p_state"])
    p0[n:] = ek["p_para_1p"] if p == 1 else ek["p_para_2p"]
    if alpha0 is None:
        alpha0 = model.dm.rom.domain.midpoint[:p]
    x0 = np.zeros(n + p)
    x0[n:] = alpha0
    return EkfConfig(Q=np.diag(q), R=ek["r"], P0=np.diag(p0), x0=x0)


@dataclass
class EkfState:
    """Filter state after a predict or correct step."""

    xbar: np.ndarray
    P: np.ndarray
    innovation: float = 0.0
    gain: np.ndarray | None = None


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _step_and_jac(model, xbar, u):
    fused = getattr(model, "step_and_jac", None)
    if fused is not None:
        return fused(xbar, u)
    return model.f(xbar, u), model.f_jac(xbar, u)


def _output_and_jac(model, xbar):
    fused = getattr(model, "output_and_jac", None)
    if fused is not None:
        return fused(xbar)
    return model.g(xbar), model.g_jac(xbar)


def predict(model: AugmentedDiscreteModel, state: EkfState, u: float,
            Q: np.ndarray) -> EkfState:
    """A-priori update: propagate the estimate and covariance through f."""
    x_prior, A = _step_and_jac(model, state.xbar, u)
    if not np.all(np.isfinite(x_prior)):
        raise SolverFailure(
            f"EKF prediction produced non-finite state (u={u}, "
            f"alpha={state.xbar[model.n:]})")
    P_prior = _symmetrize(A @ state.P @ A.T + Q)
    return EkfState(xbar=x_prior, P=P_prior)


def correct(model: AugmentedDiscreteModel, state: EkfState, y: float,
            R: float) -> EkfState:
    """A-posteriori update with the scalar volume-temperature measurement."""
    y_prior, c = _output_and_jac(model, state.xbar)
    s = float(c @ state.P @ c) + R
    assert s > 0, "innovation variance must be positive"
    gain = (state.P @ c) / s
    innovation = y - y_prior
    x_post = state.xbar + gain * innovation
    P_post = _symmetrize(state.P - np.outer(gain, c @ state.P))
    return EkfState(xbar=x_post, P=P_post, innovation=innovation, gain=gain)


@dataclass
class EstimateRecord:
    """Per-step estimator outputs shared by the EKF and the MHE."""

    t: np.ndarray             # (K+1,)
    u: np.ndarray             # (K+1,)
    y_meas: np.ndarray        # (K+1,)
    y_hat: np.ndarray         # (K+1,)
    t_peak_hat: np.ndarray    # (K+1,)
    xbar: np.ndarray          # (K+1, n+p)
    P_trace: np.ndarray       # (K+1,)
    n: int
    p: int
    # moving-horizon extras; all-zero for the EKF
    solver_iters: np.ndarray | None = None
    active_lb: np.ndarray | None = None    # (K+1, p) bool
    active_ub: np.ndarray | None = None
    kkt_residual: np.ndarray | None = None
    P_hist: np.ndarray | None = None       # (K+1, n+p, n+p)

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.xbar[:, self.n:]

    @property
    def steps(self) -> int:
        return len(self.t) - 1


def run_ekf(model: AugmentedDiscreteModel, config: EkfConfig,
            u_seq, y_seq, store_covariances: bool = False,
            collect_timing: bool = False):
    """Filter an ordered input/measurement stream.

    u_seq has K samples (u_k drives step k -> k+1) and y_seq has K+1
    samples; y_0 is never used for correction because the initial state
    is fixed at the pre-treatment condition.  With collect_timing the
    per-step wall-clock times are returned alongside the record.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    y_seq = np.asarray(y_seq, dtype=float)
    K = len(y_seq) - 1
    if len(u_seq) < K:
        raise ValidationError(
            f"input stream has {len(u_seq)} samples, need {K} for {K + 1} outputs")

    dim = model.dim
    state = EkfState(xbar=config.x0.copy(), P=config.P0.copy())
    xbar = np.zeros((K + 1, dim))
    y_hat = np.zeros(K + 1)
    t_peak_hat = np.zeros(K + 1)
    P_trace = np.zeros(K + 1)
    P_hist = np.zeros((K + 1, dim, dim)) if store_covariances else None

    def log(k, st):
        xbar[k] = st.xbar
        y_hat[k] = model.g(st.xbar)
        t_peak_hat[k] = model.t_peak(st.xbar)
        P_trace[k] = np.trace(st.P)
        if store_covariances:
            P_hist[k] = st.P

    log(0, state)
    step_seconds = np.zeros(K) if collect_timing else None
    for k in range(1, K + 1):
        tic = _time.perf_counter() if collect_timing else 0.0
        state = predict(model, state, u_seq[k - 1], config.Q)
        state = correct(model, state, y_seq[k], config.R)
        if collect_timing:
            step_seconds[k - 1] = _time.perf_counter() - tic
        log(k, state)

    u_full = np.zeros(K + 1)
    u_full[:K] = u_seq[:K]
    record = EstimateRecord(
        t=model.t_s * np.arange(K + 1),
        u=u_full,
        y_meas=y_seq,
        y_hat=y_hat,
        t_peak_hat=t_peak_hat,
        xbar=xbar,
        P_trace=P_trace,
        n=model.n,
        p=model.p,
        P_hist=P_hist,
    )
    if collect_timing:
        return record, step_seconds
    return record


# ---------------------------------------------------------------------------
# estimate-record CSV
# ---------------------------------------------------------------------------

def write_estimate_csv(path, record: EstimateRecord) -> None:
    """Write the per-step estimate record; MHE columns appear when present."""
    path = Path(path)
    p = record.p
    header = (["k", "t", "u", "y_meas", "y_hat", "T_peak_hat"]
              + [f"alpha_hat_{j + 1}" for j in range(p)] + ["P_trace"])
    mhe_cols = record.solver_iters is not None
    if mhe_cols:
        header += ["solver_iters"]
        for j in range(p):
            header += [f"active_lb_{j + 1}", f"active_ub_{j + 1}"]
        header += ["kkt_residual"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(record.t)):
            row = [str(k)] + [
                "%.9e" % v
                for v in (record.t[k], record.u[k], record.y_meas[k],
                          record.y_hat[k], record.t_peak_hat[k],
                          *record.alpha_hat[k], record.P_trace[k])
            ]
            if mhe_cols:
                row.append(str(int(record.solver_iters[k])))
                for j in range(p):
                    row.append(str(int(record.active_lb[k, j])))
                    row.append(str(int(record.active_ub[k, j])))
                row.append("%.9e" % record.kkt_residual[k])
            fh.write(",".join(row) + "\n")
