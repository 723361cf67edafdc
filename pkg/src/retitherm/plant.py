"""Discrete-time plant models and measurement-trace simulation.

The reduced model is discretized with the implicit Euler method,
x_{k+1} = A_d x_k + b_d(alpha) u_k, and augmented with constant
parameter dynamics alpha_{k+1} = alpha_k so that the estimators can
track states and absorption prefactors jointly.  Simulated traces add
Gaussian noise to the measured volume temperature only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import SolverFailure, ValidationError
from .pmor import ReducedModel
from .thermal import FullOrderModel


@dataclass
class DiscreteModel:
    """Implicit-Euler discretization of a reduced model.

    A_d = (I - t_s A)^{-1} and b_d(alpha) = (I - t_s A)^{-1} t_s b(alpha).
    The inverse is applied once to the DEIM input gain, so evaluating
    b_d(alpha) online stays an O(n d) operation.
    """

    A_d: np.ndarray           # n x n
    bd_gain: np.ndarray       # n x d, (I - t_s A)^{-1} t_s (DEIM input gain)
    rom: ReducedModel
    t_s: float

    @property
    def n(self) -> int:
        return self.A_d.shape[0]

    @property
    def c_peak(self) -> np.ndarray:
        return self.rom.c_peak

    def b_d(self, alpha) -> np.ndarray:
        return self.bd_gain @ self.rom.b_entries.values(self.rom._alpha2(alpha))

    def b_d_grad(self, alpha) -> np.ndarray:
        """d b_d / d alpha, shape (n, 2)."""
        return self.bd_gain @ self.rom.b_entries.gradient(self.rom._alpha2(alpha))

    def c_vol(self, alpha) -> np.ndarray:
        return self.rom.c_vol(alpha)

    def c_vol_grad(self, alpha) -> np.ndarray:
        return self.rom.c_vol_grad(alpha)

    def spectral_radius(self) -> float:
        return float(np.abs(la.eigvals(self.A_d)).max())


def discretize(rom: ReducedModel, t_s: float) -> DiscreteModel:
    """Build the implicit-Euler discrete model with sampling time t_s."""
    if t_s <= 0:
        raise ValidationError(f"sampling time must be positive, got {t_s}")
    M = np.eye(rom.n) - t_s * rom.A
    try:
        lu, piv = la.lu_factor(M)
    except la.LinAlgError as exc:  # pragma: no cover - Hurwitz A prevents this
        raise SolverFailure("I - t_s A is singular") from exc
    A_d = la.lu_solve((lu, piv), np.eye(rom.n))
    bd_gain = la.lu_solve((lu, piv), t_s * rom.input_gain)
    dm = DiscreteModel(A_d=A_d, bd_gain=bd_gain, rom=rom, t_s=t_s)
    # implicit Euler of a Hurwitz system is strictly contractive; A = 0
    # (used in unit tests) sits exactly on the boundary
    assert dm.spectral_radius() <= 1.0
    return dm


@dataclass
class AugmentedDiscreteModel:
    """Discrete model extended with constant-parameter states.

    The extended state is xbar = (x, alpha) with dimension n + p.  The
    transition is affine in x for fixed alpha, and the parameter block
    is the identity.  Jacobians of the transition and output maps are
    analytic: the only nontrivial blocks are db_d/dalpha * u and
    [c_vol(alpha), (dc_vol/dalpha) x].
    """

    dm: DiscreteModel
    p: int

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValidationError(f"parameter count must be 1 or 2, got {self.p}")
        # constant blocks of the transition Jacobian, copied per evaluation
        self._jac_template = np.zeros((self.dim, self.dim))
        self._jac_template[: self.n, : self.n] = self.dm.A_d
        self._jac_template[self.n:, self.n:] = np.eye(self.p)
        self._alpha_ch_fixed = self.dm.rom.alpha_ch_fixed

    @property
    def n(self) -> int:
        return self.dm.n

    @property
    def dim(self) -> int:
        return self.dm.n + self.p

    @property
    def t_s(self) -> float:
        return self.dm.t_s

    def split(self, xbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return xbar[: self.n], xbar[self.n:]

    def f(self, xbar: np.ndarray, u: float) -> np.ndarray:
        x, alpha = self.split(xbar)
        x_next = self.dm.A_d @ x + self.dm.b_d(alpha) * u
        return np.concatenate([x_next, alpha])

    def f_jac(self, xbar: np.ndarray, u: float) -> np.ndarray:
        _, alpha = self.split(xbar)
        J = np.zeros((self.dim, self.dim))
        J[: self.n, : self.n] = self.dm.A_d
        J[: self.n, self.n:] = self.dm.b_d_grad(alpha)[:, : self.p] * u
        J[self.n:, self.n:] = np.eye(self.p)
        return J

    def g(self, xbar: np.ndarray) -> float:
        x, alpha = self.split(xbar)
        return float(self.dm.c_vol(alpha) @ x)

    def g_jac(self, xbar: np.ndarray) -> np.ndarray:
        """Output row [c_vol(alpha), (dc_vol/dalpha) x], shape (n + p,)."""
        x, alpha = self.split(xbar)
        row = np.empty(self.dim)
        row[: self.n] = self.dm.c_vol(alpha)
        row[self.n:] = self.dm.c_vol_grad(alpha)[: self.p, :] @ x
        return row

    def t_peak(self, xbar: np.ndarray) -> float:
        return float(self.dm.c_peak @ xbar[: self.n])

    def _alpha2_fast(self, alpha: np.ndarray) -> np.ndarray:
        if self.p == 1:
            return np.array([alpha[0], self._alpha_ch_fixed])
        return alpha

    def step_and_jac(self, xbar: np.ndarray, u: float):
        """Transition value and Jacobian from one shared model evaluation."""
        n = self.n
        x, alpha = xbar[:n], xbar[n:]
        vals, grad = self.dm.rom.b_entries.values_and_gradient(
            self._alpha2_fast(alpha))
        x_next = np.concatenate([self.dm.A_d @ x + (self.dm.bd_gain @ vals) * u,
                                 alpha])
        J = self._jac_template.copy()
        J[:n, n:] = (self.dm.bd_gain @ grad[:, : self.p]) * u
        return x_next, J

    def output_and_jac(self, xbar: np.ndarray):
        """Output value and row Jacobian from one shared model evaluation."""
        n = self.n
        x, alpha = xbar[:n], xbar[n:]
        vals, grad = self.dm.rom.c_entries.values_and_gradient(
            self._alpha2_fast(alpha))
        c_row = vals @ self.dm.rom.output_gain
        row = np.empty(self.dim)
        row[:n] = c_row
        row[n:] = (grad[:, : self.p].T @ self.dm.rom.output_gain) @ x
        return float(c_row @ x), row


def augment(dm: DiscreteModel, p: int) -> AugmentedDiscreteModel:
    """Extend a discrete model with p constant-parameter states."""
    return AugmentedDiscreteModel(dm=dm, p=p)


# ---------------------------------------------------------------------------
# trace simulation
# ---------------------------------------------------------------------------

@dataclass
class SimTrace:
    """A simulated measurement trace, reproducible from its seed."""

    t: np.ndarray             # (K+1,)
    u: np.ndarray             # (K+1,), u[K] unused by the dynamics
    y_clean: np.ndarray       # (K+1,)
    y_noisy: np.ndarray       # (K+1,)
    alpha_true: np.ndarray    # (p,)
    seed: int | None
    noise_var: float
    t_s: float
    t_peak: np.ndarray | None = None
    states: np.ndarray | None = None   # (K+1, n_truth) truth states
    config_hash: str = ""
    truth_order: int = 0

    def __post_init__(self):
        lengths = {len(self.t), len(self.u), len(self.y_clean), len(self.y_noisy)}
        if len(lengths) != 1:
            raise ValidationError("trace sequences have unequal lengths")

    @property
    def steps(self) -> int:
        return len(self.t) - 1

    @property
    def p(self) -> int:
        return len(self.alpha_true)


def _truth_stepper(model, alpha, t_s):
    """Return (step(x, u) -> x_next, c_vol row, c_peak row, n) for a truth model."""
    if isinstance(model, FullOrderModel):
        M = sps.identity(model.n_f, format="csc") - t_s * model.A.tocsc()
        lu = spla.splu(M)
        b = model.b(alpha)
        return (lambda x, u: lu.solve(x + t_s * b * u),
                model.c_vol(alpha), model.c_peak, model.n_f)
    if isinstance(model, (ReducedModel, DiscreteModel)):
        dm = model if isinstance(model, DiscreteModel) else discretize(model, t_s)
        b_d = dm.b_d(alpha)
        return (lambda x, u: dm.A_d @ x + b_d * u,
                dm.c_vol(alpha), dm.c_peak, dm.n)
    raise ValidationError(f"unsupported truth model type {type(model).__name__}")


def simulate_plant(truth_model, alpha_true, input_signal, noise_var: float,
                   steps: int, seed: int | None = None,
                   t_s: float = 0.001, store_states: bool = True) -> SimTrace:
    """Simulate the truth model and add Gaussian output noise.

    The truth model is the full-order model in the standard protocol; a
    reduced model may be substituted for exact-model debugging runs.
    The input signal is an array of at least `steps` samples (u_k drives
    the step from k to k+1).
    """
    if noise_var < 0:
        raise ValidationError(f"noise variance must be nonnegative, got {noise_var}")
    alpha_true = np.atleast_1d(np.asarray(alpha_true, dtype=float))
    u_seq = np.broadcast_to(np.asarray(input_signal, dtype=float).ravel(), (steps,)) \
        if np.ndim(input_signal) == 0 else np.asarray(input_signal, dtype=float)
    if len(u_seq) < steps:
        raise ValidationError(
            f"input signal has {len(u_seq)} samples, need at least {steps}")

    step, c_vol, c_peak, n_truth = _truth_stepper(truth_model, alpha_true, t_s)
    x = np.zeros(n_truth)
    y_clean = np.zeros(steps + 1)
    t_peak = np.zeros(steps + 1)
    states = np.zeros((steps + 1, n_truth)) if store_states else None
    for k in range(steps):
        x = step(x, u_seq[k])
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"truth simulation diverged at step {k + 1}")
        y_clean[k + 1] = c_vol @ x
        t_peak[k + 1] = c_peak @ x
        if store_states:
            states[k + 1] = x

    rng = np.random.default_rng(seed)
    y_noisy = y_clean + rng.normal(0.0, np.sqrt(noise_var), steps + 1)
    u_full = np.zeros(steps + 1)
    u_full[:steps] = u_seq[:steps]
    return SimTrace(
        t=t_s * np.arange(steps + 1),
        u=u_full,
        y_clean=y_clean,
        y_noisy=y_noisy,
        alpha_true=alpha_true,
        seed=seed,
        noise_var=noise_var,
        t_s=t_s,
        t_peak=t_peak,
        states=states,
        config_hash=getattr(truth_model, "config_hash", ""),
        truth_order=n_truth,
    )


# ---------------------------------------------------------------------------
# trace CSV I/O
# ---------------------------------------------------------------------------

def write_sim_csv(path, trace: SimTrace) -> None:
    """Write a trace plus a sidecar metadata file (path + '.meta.json')."""
    path = Path(path)
    alpha_cols = [f"alpha_true_{j + 1}" for j in range(trace.p)]
    header = ["k", "t", "u", "y_clean", "y_noisy"] + alpha_cols
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(trace.t)):
            row = [str(k)] + [
                "%.17e" % v
                for v in (trace.t[k], trace.u[k], trace.y_clean[k],
                          trace.y_noisy[k], *trace.alpha_true)
            ]
            fh.write(",".join(row) + "\n")
    meta = {
        "seed": trace.seed,
        "noise_var": trace.noise_var,
        "t_s": trace.t_s,
        "config_hash": trace.config_hash,
        "truth_order": trace.truth_order,
        "p": trace.p,
    }
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def read_sim_csv(path) -> SimTrace:
    """Read a trace written by write_sim_csv (truth states are not stored)."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    required = ["k", "t", "u", "y_clean", "y_noisy", "alpha_true_1"]
    for col in required:
        if col not in header:
            raise ValidationError(f"trace CSV is missing column '{col}'")
    col = {name: i for i, name in enumerate(header)}
    p = 2 if "alpha_true_2" in header else 1
    alpha = np.array([data[0, col[f"alpha_true_{j + 1}"]] for j in range(p)])

    meta_path = path.with_suffix(path.suffix + ".meta.json")
    meta = {}
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
    t = data[:, col["t"]]
    t_s = float(meta.get("t_s", t[1] - t[0] if len(t) > 1 else 0.001))
    return SimTrace(
        t=t,
        u=data[:, col["u"]],
        y_clean=data[:, col["y_clean"]],
        y_noisy=data[:, col["y_noisy"]],
        alpha_true=alpha,
        seed=meta.get("seed"),
        noise_var=float(meta.get("noise_var", 0.0)),
        t_s=t_s,
        config_hash=meta.get("config_hash", ""),
        truth_order=int(meta.get("truth_order", 0)),
    )
