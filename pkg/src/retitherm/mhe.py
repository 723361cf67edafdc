"""Moving horizon estimation with box constraints on the parameters.

At every sample the estimator solves a weighted nonlinear least-squares
problem over the stacked state sequence of the last N steps: a prior
misfit at the window start, output misfits against the measured volume
temperatures, and dynamics misfits between consecutive stages.  The
absorption prefactors are box-constrained at every stage.  The solver
is a projected Gauss-Newton iteration with Levenberg damping.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .errors import SolverFailure, ValidationError
from .ekf import EkfConfig, EkfState, EstimateRecord, correct, predict
from .plant import AugmentedDiscreteModel, DiscreteModel


# ---------------------------------------------------------------------------
# box-constrained nonlinear least squares
# ---------------------------------------------------------------------------

@dataclass
class NlsSettings:
    max_iter: int = 30
    grad_tol: float = 1e-8
    step_tol: float = 1e-12


@dataclass
class NlsResult:
    x: np.ndarray
    status: str               # converged_grad | converged_step | max_iter
    iterations: int
    kkt_residual: float
    cost: float


def _check_finite(r: np.ndarray) -> None:
    if not np.all(np.isfinite(r)):
        idx = int(np.flatnonzero(~np.isfinite(r))[0])
        raise SolverFailure(f"non-finite residual at component {idx}")


def solve_box_nls(residual_fn, jacobian_fn, x0, lower, upper,
                  settings: NlsSettings | None = None) -> NlsResult:
    """Minimize 0.5 ||r(x)||^2 subject to lower <= x <= upper.

    Projected Gauss-Newton with Levenberg damping: steps are computed
    on the inactive variables only and the trial point is clipped back
    into the box.  Damping stays at zero until a step is rejected, so a
    purely quadratic problem is solved in a single iteration.  Returns
    the projected-gradient norm as the KKT residual.
    """
    settings = settings or NlsSettings()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)

    r = residual_fn(x)
    _check_finite(r)
    cost = 0.5 * float(r @ r)
    lam = 0.0
    kkt = np.inf
    status = "max_iter"
    it = 0
    active_tol = 1e-12

    for it in range(1, settings.max_iter + 1):
        J = jacobian_fn(x)
        g = J.T @ r
        kkt = float(np.abs(x - np.clip(x - g, lower, upper)).max())
        if kkt < settings.grad_tol:
            status = "converged_grad"
            break

        at_lb = (x <= lower + active_tol) & (g > 0)
        at_ub = (x >= upper - active_tol) & (g < 0)
        free = ~(at_lb | at_ub)
        Jf = J[:, free]
        gf = g[free]
        H = Jf.T @ Jf

        accepted = False
        for _ in range(25):
            try:
                cf = la.cho_factor(H + lam * np.eye(H.shape[0]), lower=True)
                step_f = la.cho_solve(cf, -gf)
            except la.LinAlgError:
                lam = max(10 * lam, 1e-10 * max(np.trace(H), 1.0))
                continue
            x_new = x.copy()
            x_new[free] += step_f
            np.clip(x_new, lower, upper, out=x_new)
            r_new = residual_fn(x_new)
            _check_finite(r_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            lam = max(10 * lam, 1e-10 * max(np.trace(H), 1.0))
        if not accepted:
            status = "converged_step"
            break

        step_norm = float(np.linalg.norm(x_new - x))
        x, r, cost = x_new, r_new, cost_new
        lam /= 3.0
        if step_norm < settings.step_tol * (1.0 + float(np.linalg.norm(x))):
            status = "converged_step"
            break

    if status == "converged_step" or status == "max_iter":
        # refresh the certificate at the final iterate
        g = jacobian_fn(x).T @ r
        kkt = float(np.abs(x - np.clip(x - g, lower, upper)).max())
    return NlsResult(x=x, status=status, iterations=it, kkt_residual=kkt,
                     cost=cost)


# ---------------------------------------------------------------------------
# constant prior weight from the stationary Riccati recursion
# ---------------------------------------------------------------------------

def dare_fixed_point(A: np.ndarray, c: np.ndarray, Q: np.ndarray, r: float,
                     tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Stationary predicted covariance of a scalar-output Kalman filter.

    Iterates P <- A (P - P c (c'Pc + r)^{-1} c'P) A' + Q to a fixed point
    (relative change below tol in the Frobenius norm).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        Pc = P @ c
        P_post = P - np.outer(Pc, Pc) / (float(c @ Pc) + r)
        P_next = A @ P_post @ A.T + Q
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.linalg.norm(P_next - P) / max(np.linalg.norm(P_next), 1e-300)
        P = P_next
        if delta < tol:
            return P
    raise SolverFailure(
        f"Riccati recursion did not reach a fixed point in {max_iter} iterations")


def riccati_state_weight(dm: DiscreteModel, alpha_bar, Q_state: np.ndarray,
                         r: float) -> np.ndarray:
    """Stationary state covariance at a nominal parameter value."""
    c = np.asarray(dm.c_vol(alpha_bar), dtype=float).ravel()
    return dare_fixed_point(dm.A_d, c, np.asarray(Q_state, dtype=float), r)


def constant_prior_weight(model: AugmentedDiscreteModel, alpha_bar,
                          Q_state: np.ndarray, r: float,
                          p_para) -> np.ndarray:
    """Block-diagonal constant weight: Riccati state block plus p_para."""
    P_state = riccati_state_weight(model.dm, alpha_bar, Q_state, r)
    W = np.zeros((model.dim, model.dim))
    W[: model.n, : model.n] = P_state
    W[model.n:, model.n:] = np.diag(np.atleast_1d(np.asarray(p_para, float)))
    return W


# ---------------------------------------------------------------------------
# moving-horizon configuration and prior updates
# ---------------------------------------------------------------------------

@dataclass
class MheConfig:
    """Horizon, weights, prior policy, bounds, and solver settings."""

    N: int
    Q: np.ndarray             # (n+p, n+p) dynamics weight (covariance)
    R: float
    P0: np.ndarray
    x0: np.ndarray
    prior_update: str = "filtering"        # filtering | smoothing
    prior_weight: str = "ekf_propagated"   # ekf_propagated | constant
    constant_weight: np.ndarray | None = None
    lower: np.ndarray | None = None        # (p,) parameter bounds, None disables
    upper: np.ndarray | None = None
    output_misfit: str = "per_stage"       # per_stage | latest_only
    solver: NlsSettings = field(default_factory=NlsSettings)

    def __post_init__(self):
        if self.N < 1:
            raise ValidationError(f"horizon must be at least 1, got {self.N}")
        if self.prior_update not in ("filtering", "smoothing"):
            raise ValidationError(f"unknown prior update '{self.prior_update}'")
        if self.prior_weight not in ("ekf_propagated", "constant"):
            raise ValidationError(f"unknown prior weight '{self.prior_weight}'")
        if self.output_misfit not in ("per_stage", "latest_only"):
            raise ValidationError(f"unknown output misfit '{self.output_misfit}'")
        if self.prior_weight == "constant" and self.constant_weight is None:
            raise ValidationError("constant prior weighting needs constant_weight")


def default_mhe_config(model: AugmentedDiscreteModel, cfg: dict,
                       alpha0=None, constrained: bool = True) -> MheConfig:
    """Default tuning: the EKF weights reused for the window misfits."""
    from .ekf import default_ekf_config

    ek = default_ekf_config(model, cfg, alpha0=alpha0)
    mh = cfg["mhe"]
    dom = model.dm.rom.domain
    config = MheConfig(
        N=mh["horizon"],
        Q=ek.Q, R=ek.R, P0=ek.P0, x0=ek.x0,
        prior_update=mh["prior_update"],
        prior_weight=mh["prior_weight"],
        lower=dom.alpha_min[: model.p] if constrained else None,
        upper=dom.alpha_max[: model.p] if constrained else None,
        solver=NlsSettings(max_iter=mh["max_iter"], grad_tol=mh["grad_tol"],
                           step_tol=mh["step_tol"]),
    )
    if config.prior_weight == "constant":
        n = model.n
        config.constant_weight = constant_prior_weight(
            model, model.dm.rom.domain.midpoint[: model.p],
            ek.Q[:n, :n], ek.R, np.diag(ek.P0)[n:])
    return config


def update_prior(start: int, model: AugmentedDiscreteModel, config: MheConfig,
                 filt_est: np.ndarray, prev_stages: np.ndarray | None,
                 prev_start: int, u_seq: np.ndarray,
                 P_prior_hist: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Prior pair (chi, P) for a window beginning at stage `start`.

    Windows that still touch the initial time use the initial pair.
    Otherwise the filtering update propagates the estimate produced one
    step before the window through the dynamics, so the prior carries
    exactly the information not covered by the window's measurements;
    the smoothing update reuses the window-start stage of the previous
    solution.  The weight is the matching one-step-ahead covariance of
    a parallel filter, or the constant Riccati-based block matrix.
    """
    if start == 0:
        return config.x0.copy(), config.P0.copy()
    if config.prior_update == "filtering":
        chi = model.f(filt_est[start - 1], u_seq[start - 1])
    else:
        if prev_stages is None:
            raise ValidationError("smoothing prior requested before any solution")
        chi = prev_stages[start - prev_start].copy()
    if config.prior_weight == "ekf_propagated":
        P = P_prior_hist[start]
    else:
        P = config.constant_weight
    return chi, P


# ---------------------------------------------------------------------------
# window problem assembly
# ---------------------------------------------------------------------------

def _inv_sqrt_factor(P: np.ndarray) -> np.ndarray:
    """L^{-1} with P = L L^T, so ||L^{-1} v||^2 = v' P^{-1} v."""
    L = la.cholesky(P, lower=True)
    return la.solve_triangular(L, np.eye(P.shape[0]), lower=True)


class _WindowProblem:
    """Stacked residual and Jacobian over one estimation window."""

    def __init__(self, model: AugmentedDiscreteModel, config: MheConfig,
                 start: int, chi: np.ndarray, P: np.ndarray,
                 u_win: np.ndarray, y_win: np.ndarray):
        self.model = model
        self.dim = model.dim
        self.start = start
        self.M = len(u_win)              # number of dynamics intervals
        self.u_win = u_win
        self.y_win = y_win               # M + 1 outputs, stage-aligned
        self.chi = chi
        self.Lp_inv = _inv_sqrt_factor(P)
        self.Lq_inv = _inv_sqrt_factor(config.Q)
        self.sr_inv = 1.0 / np.sqrt(config.R)
        self.latest_only = config.output_misfit == "latest_only"
        # stages measured: skip the global time-0 output, which is fixed
        # by the initial condition and never corrected against
        self.meas_stages = [i for i in range(self.M + 1) if start + i >= 1]
        self.n_res = self.dim + len(self.meas_stages) + self.M * self.dim

    def stages(self, z: np.ndarray) -> np.ndarray:
        return z.reshape(self.M + 1, self.dim)

    def bounds(self, config: MheConfig) -> tuple[np.ndarray, np.ndarray]:
        lower = np.full((self.M + 1, self.dim), -np.inf)
        upper = np.full((self.M + 1, self.dim), np.inf)
        if config.lower is not None:
            lower[:, self.model.n:] = config.lower
            upper[:, self.model.n:] = config.upper
        return lower.ravel(), upper.ravel()

    def residual(self, z: np.ndarray) -> np.ndarray:
        X = self.stages(z)
        r = np.empty(self.n_res)
        r[: self.dim] = self.Lp_inv @ (X[0] - self.chi)
        pos = self.dim
        for i in self.meas_stages:
            y_i = self.y_win[-1] if self.latest_only else self.y_win[i]
            r[pos] = self.sr_inv * (y_i - self.model.g(X[i]))
            pos += 1
        for i in range(self.M):
            w = X[i + 1] - self.model.f(X[i], self.u_win[i])
            r[pos: pos + self.dim] = self.Lq_inv @ w
            pos += self.dim
        return r

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        X = self.stages(z)
        d = self.dim
        J = np.zeros((self.n_res, (self.M + 1) * d))
        J[:d, :d] = self.Lp_inv
        pos = d
        for i in self.meas_stages:
            J[pos, i * d: (i + 1) * d] = -self.sr_inv * self.model.g_jac(X[i])
            pos += 1
        for i in range(self.M):
            A_i = self.model.f_jac(X[i], self.u_win[i])
            J[pos: pos + d, i * d: (i + 1) * d] = -self.Lq_inv @ A_i
            J[pos: pos + d, (i + 1) * d: (i + 2) * d] = self.Lq_inv
            pos += d
        return J


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def run_mhe(model: AugmentedDiscreteModel, config: MheConfig,
            u_seq, y_seq, collect_timing: bool = False):
    """Estimate an ordered input/measurement stream over a moving window.

    Returns an EstimateRecord; with collect_timing a (record, seconds
    per step) pair.  A parallel EKF with the same weights supplies the
    propagated prior covariances.  Solver failures fall back to the
    warm start and are flagged with solver_iters = -1.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    y_seq = np.asarray(y_seq, dtype=float)
    K = len(y_seq) - 1
    if len(u_seq) < K:
        raise ValidationError(
            f"input stream has {len(u_seq)} samples, need {K} for {K + 1} outputs")

    dim, n, p = model.dim, model.n, model.p
    run_ekf_parallel = config.prior_weight == "ekf_propagated"
    ekf_state = EkfState(xbar=config.x0.copy(), P=config.P0.copy())
    P_prior_hist = np.zeros((K + 1, dim, dim)) if run_ekf_parallel else None

    filt_est = np.zeros((K + 1, dim))
    filt_est[0] = config.x0
    prev_stages: np.ndarray | None = None
    prev_start = 0

    xbar = np.zeros((K + 1, dim))
    xbar[0] = config.x0
    y_hat = np.zeros(K + 1)
    t_peak_hat = np.zeros(K + 1)
    P_trace = np.zeros(K + 1)
    solver_iters = np.zeros(K + 1, dtype=int)
    active_lb = np.zeros((K + 1, p), dtype=bool)
    active_ub = np.zeros((K + 1, p), dtype=bool)
    kkt_residual = np.zeros(K + 1)
    step_seconds = np.zeros(K)

    y_hat[0] = model.g(config.x0)
    t_peak_hat[0] = model.t_peak(config.x0)
    P_trace[0] = np.trace(config.P0)

    for k in range(1, K + 1):
        tic = _time.perf_counter()
        if run_ekf_parallel:
            pred = predict(model, ekf_state, u_seq[k - 1], config.Q)
            P_prior_hist[k] = pred.P
            ekf_state = correct(model, pred, y_seq[k], config.R)

        start = max(0, k - config.N)
        chi, P = update_prior(start, model, config, filt_est, prev_stages,
                              prev_start, u_seq, P_prior_hist)
        problem = _WindowProblem(model, config, start, chi, P,
                                 u_seq[start:k], y_seq[start: k + 1])

        # warm start: shift the previous solution, propagate a new last stage
        if prev_stages is None:
            guess = np.tile(config.x0, (problem.M + 1, 1))
        else:
            guess = np.empty((problem.M + 1, dim))
            offset = start - prev_start
            kept = prev_stages[offset:]
            guess[: len(kept)] = kept
            for i in range(len(kept), problem.M + 1):
                guess[i] = model.f(guess[i - 1], u_seq[start + i - 1])
        lower, upper = problem.bounds(config)

        fell_back = False
        try:
            result = solve_box_nls(problem.residual, problem.jacobian,
                                   guess.ravel(), lower, upper, config.solver)
            stages = problem.stages(result.x)
        except SolverFailure:
            fell_back = True
            stages = np.clip(guess.ravel(), lower, upper).reshape(guess.shape)

        est = stages[-1]
        filt_est[k] = est
        prev_stages, prev_start = stages, start

        xbar[k] = est
        y_hat[k] = model.g(est)
        t_peak_hat[k] = model.t_peak(est)
        if run_ekf_parallel:
            P_trace[k] = np.trace(ekf_state.P)
        else:
            P_trace[k] = np.trace(config.constant_weight)
        if config.lower is not None:
            alpha = est[n:]
            active_lb[k] = alpha <= config.lower + 1e-9
            active_ub[k] = alpha >= config.upper - 1e-9
        if fell_back:
            solver_iters[k] = -1
            kkt_residual[k] = np.inf
        else:
            solver_iters[k] = result.iterations
            kkt_residual[k] = result.kkt_residual
        step_seconds[k - 1] = _time.perf_counter() - tic

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
        n=n,
        p=p,
        solver_iters=solver_iters,
        active_lb=active_lb,
        active_ub=active_ub,
        kkt_residual=kkt_residual,
    )
    if collect_timing:
        return record, step_seconds
    return record
