"""Experiment orchestration: inputs, ensembles, metrics, identification.

Everything downstream of the models lives here: excitation signals,
Monte-Carlo ensembles with seeded noise, the relative error metrics
and their aggregates, measurement-trace ingestion, offline parameter
identification, and side-by-side estimator comparisons.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .config import config_hash
from .ekf import EkfConfig, EstimateRecord, default_ekf_config, run_ekf, \
    write_estimate_csv
from .errors import SolverFailure, ValidationError
from .mhe import MheConfig, NlsSettings, default_mhe_config, run_mhe, \
    solve_box_nls
from .plant import AugmentedDiscreteModel, SimTrace, augment, discretize, \
    simulate_plant
from .pmor import ReducedModel
from .thermal import FullOrderModel


# ---------------------------------------------------------------------------
# input signals
# ---------------------------------------------------------------------------

@dataclass
class InputSignal:
    """Piecewise-constant laser power profile."""

    kind: str                      # constant | staircase
    levels: np.ndarray             # W, one entry per segment
    durations: np.ndarray          # s, one entry per segment

    def __post_init__(self):
        self.levels = np.atleast_1d(np.asarray(self.levels, dtype=float))
        self.durations = np.atleast_1d(np.asarray(self.durations, dtype=float))
        if np.any(self.levels < 0):
            raise ValidationError("laser power must be nonnegative")
        if np.any(self.durations <= 0):
            raise ValidationError("segment durations must be positive")
        if len(self.levels) != len(self.durations):
            raise ValidationError("levels and durations must have equal length")

    @property
    def total_duration(self) -> float:
        return float(self.durations.sum())

    def samples(self, steps: int, t_s: float) -> np.ndarray:
        """Sample u_k = u(k t_s) for k = 0..steps-1."""
        if steps * t_s > self.total_duration + 1e-12:
            raise ValidationError(
                f"signal covers {self.total_duration} s, experiment needs "
                f"{steps * t_s} s")
        edges = np.cumsum(self.durations)
        t = t_s * np.arange(steps)
        return self.levels[np.searchsorted(edges, t, side="right")]


def make_input(kind: str, cfg: dict | None = None, *, level: float | None = None,
               levels=None, step_duration: float | None = None) -> InputSignal:
    """Build the default constant or staircase excitation."""
    cfg = cfg or {}
    h = cfg.get("harness", {})
    if kind == "constant":
        lvl = level if level is not None else h.get("input_power_W", 0.030)
        return InputSignal("constant", [lvl], [1e9])
    if kind == "staircase":
        lv = levels if levels is not None else h.get(
            "staircase_levels_W", [0.030, 0.015, 0.045, 0.025])
        dur = step_duration if step_duration is not None else h.get(
            "staircase_step_s", 0.1)
        return InputSignal("staircase", lv, [dur] * len(np.atleast_1d(lv)))
    raise ValidationError(f"unknown input kind '{kind}'")


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def _rel_err(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Elementwise relative error with the 0/0 = 0 convention."""
    num = np.abs(est - ref)
    den = np.abs(ref)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class RunErrors:
    """Per-step relative errors of one estimator run against a reference."""

    e_x: np.ndarray        # (K+1,)
    e_alpha: np.ndarray    # (K+1, p)
    e_peak: np.ndarray     # (K+1,)
    e_y: np.ndarray        # (K+1,)


def run_errors(truth: SimTrace, record: EstimateRecord,
               rom: ReducedModel) -> RunErrors:
    """Compare an estimate record against a truth trace.

    The reduced estimate is lifted with V when the truth carries
    full-order states; the output reference is the clean (noise-free)
    truth output.
    """
    if truth.states is None:
        raise ValidationError("truth trace carries no states; rerun with "
                              "store_states=True")
    x_hat = record.xbar[:, : record.n]
    if truth.states.shape[1] == rom.n:
        x_ref, x_cmp = truth.states, x_hat
    else:
        x_ref, x_cmp = truth.states, rom.lift(x_hat)
    num = np.linalg.norm(x_cmp - x_ref, axis=1)
    den = np.linalg.norm(x_ref, axis=1)
    e_x = np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    alpha_ref = np.broadcast_to(truth.alpha_true, record.alpha_hat.shape)
    e_alpha = _rel_err(record.alpha_hat, alpha_ref)
    e_peak = _rel_err(record.t_peak_hat, truth.t_peak)
    e_y = _rel_err(record.y_hat, truth.y_clean)
    return RunErrors(e_x=e_x, e_alpha=e_alpha, e_peak=e_peak, e_y=e_y)


@dataclass
class ErrorMetrics:
    """Mean/std error curves over an ensemble plus scalar aggregates.

    sums[m] = sum over k = 0..K of the mean error curve; sigma_bar[m] =
    mean over k of the across-run standard deviation.
    """

    t: np.ndarray
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    sums: dict[str, float]
    sigma_bar: dict[str, float]


def aggregate_errors(runs: list[RunErrors], t: np.ndarray) -> ErrorMetrics:
    """Average per-step errors over realizations and form the aggregates."""
    if not runs:
        raise ValidationError("no successful runs to aggregate")
    p = runs[0].e_alpha.shape[1]
    curves = {"e_x": np.stack([r.e_x for r in runs]),
              "e_peak": np.stack([r.e_peak for r in runs]),
              "e_y": np.stack([r.e_y for r in runs])}
    for j in range(p):
        curves[f"e_alpha_{j + 1}"] = np.stack([r.e_alpha[:, j] for r in runs])
    mean = {m: c.mean(axis=0) for m, c in curves.items()}
    std = {m: c.std(axis=0) for m, c in curves.items()}
    return ErrorMetrics(
        t=t,
        mean=mean,
        std=std,
        sums={m: float(mean[m].sum()) for m in curves},
        sigma_bar={m: float(std[m].mean()) for m in curves},
    )


# ---------------------------------------------------------------------------
# ensembles and reports
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Everything needed to reproduce one Monte-Carlo experiment."""

    full_model: FullOrderModel
    rom: ReducedModel
    p: int
    alpha_true: np.ndarray
    signal: InputSignal
    steps: int
    noise_var: float
    t_s: float
    cfg: dict
    name: str = ""

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "p": self.p,
            "alpha_true": list(np.atleast_1d(self.alpha_true).astype(float)),
            "input_kind": self.signal.kind,
            "steps": self.steps,
            "noise_var": self.noise_var,
            "t_s": self.t_s,
        }


@dataclass
class ExperimentReport:
    """Aggregated metrics plus the bookkeeping that makes them traceable."""

    scenario: dict
    metrics: dict[str, ErrorMetrics]
    seeds: list[int]
    config_hash: str
    step_seconds: dict[str, float]      # median wall clock per estimator step
    excluded: dict[str, int]
    records: dict[str, EstimateRecord] | None = None


def _augmented(rom: ReducedModel, p: int, t_s: float) -> AugmentedDiscreteModel:
    return augment(discretize(rom, t_s), p)


def run_ensemble(scenario: Scenario, n_realizations: int, seed: int = 0,
                 estimators=("ekf", "mhe"),
                 ekf_config: EkfConfig | None = None,
                 mhe_config: MheConfig | None = None) -> ExperimentReport:
    """Monte-Carlo comparison of the estimators on a shared truth.

    The clean truth trace is simulated once; each realization adds an
    independently seeded noise draw, so identical seeds give identical
    measurements across estimator configurations (paired comparisons).
    """
    sc = scenario
    u_seq = sc.signal.samples(sc.steps, sc.t_s)
    truth = simulate_plant(sc.full_model, sc.alpha_true, u_seq, 0.0, sc.steps,
                           seed=None, t_s=sc.t_s)
    model = _augmented(sc.rom, sc.p, sc.t_s)
    if ekf_config is None:
        ekf_config = default_ekf_config(model, sc.cfg)
    if mhe_config is None:
        mhe_config = default_mhe_config(model, sc.cfg)

    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(
        n_realizations)]
    runs: dict[str, list[RunErrors]] = {e: [] for e in estimators}
    excluded = {e: 0 for e in estimators}
    timings: dict[str, list[float]] = {e: [] for e in estimators}

    for s in seeds:
        rng = np.random.default_rng(s)
        y_noisy = truth.y_clean + rng.normal(0.0, np.sqrt(sc.noise_var),
                                             sc.steps + 1)
        for est in estimators:
            try:
                if est == "ekf":
                    rec, secs = run_ekf(model, ekf_config, u_seq, y_noisy,
                                        collect_timing=True)
                    timings[est].append(float(np.median(secs)))
                elif est == "mhe":
                    rec, secs = run_mhe(model, mhe_config, u_seq, y_noisy,
                                        collect_timing=True)
                    timings[est].append(float(np.median(secs)))
                else:
                    raise ValidationError(f"unknown estimator '{est}'")
                runs[est].append(run_errors(truth, rec, sc.rom))
            except SolverFailure:
                excluded[est] += 1

    metrics = {e: aggregate_errors(runs[e], truth.t) for e in estimators}
    return ExperimentReport(
        scenario=sc.descriptor(),
        metrics=metrics,
        seeds=seeds,
        config_hash=config_hash(sc.cfg),
        step_seconds={e: float(np.median(timings[e])) for e in estimators},
        excluded=excluded,
    )


def write_report_csvs(report: ExperimentReport, outdir) -> list[Path]:
    """One metrics CSV per estimator plus a JSON summary; returns paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for est, m in report.metrics.items():
        path = outdir / f"errors_{est}.csv"
        names = sorted(m.mean)
        header = ["k", "t"] + names + [f"sigma_{x}" for x in names]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(len(m.t)):
                row = [str(k), "%.9e" % m.t[k]]
                row += ["%.9e" % m.mean[x][k] for x in names]
                row += ["%.9e" % m.std[x][k] for x in names]
                fh.write(",".join(row) + "\n")
        written.append(path)
    summary = {
        "scenario": report.scenario,
        "config_hash": report.config_hash,
        "seeds": report.seeds,
        "step_seconds": report.step_seconds,
        "excluded": report.excluded,
        "sums": {e: m.sums for e, m in report.metrics.items()},
        "sigma_bar": {e: m.sigma_bar for e, m in report.metrics.items()},
    }
    spath = outdir / "summary.json"
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2)
    written.append(spath)
    return written


# ---------------------------------------------------------------------------
# measurement traces
# ---------------------------------------------------------------------------

@dataclass
class MeasurementTrace:
    """A 1 kHz volume-temperature record from one treatment spot."""

    spot_id: str
    t: np.ndarray
    u: np.ndarray
    T_vol: np.ndarray
    alpha_ident: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.t) == len(self.u) == len(self.T_vol)):
            raise ValidationError("measurement columns have unequal lengths")
        if not np.all(np.isfinite(self.T_vol)):
            raise ValidationError("non-finite temperatures in measurement trace")
        dt = np.diff(self.t)
        if len(dt) and not np.allclose(dt, 1e-3, rtol=1e-6, atol=1e-9):
            raise ValidationError("measurement trace is not sampled at 1 kHz")


def write_measurement_csv(path, trace: MeasurementTrace) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("t,u,T_vol\n")
        for k in range(len(trace.t)):
            fh.write("%.17e,%.17e,%.17e\n" % (trace.t[k], trace.u[k],
                                              trace.T_vol[k]))
    if trace.alpha_ident is not None:
        meta = path.with_suffix(path.suffix + ".spot_meta")
        cols = ["alpha_ident_rpe", "alpha_ident_ch"][: len(trace.alpha_ident)]
        with open(meta, "w") as fh:
            fh.write(",".join(cols) + "\n")
            fh.write(",".join("%.17e" % a for a in trace.alpha_ident) + "\n")


def _read_measurement_file(path: Path) -> MeasurementTrace:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    for col in ("t", "u", "T_vol"):
        if col not in header:
            raise ValidationError(f"measurement CSV {path.name} is missing "
                                  f"column '{col}'")
    col = {name: i for i, name in enumerate(header)}
    alpha_ident = None
    meta = path.with_suffix(path.suffix + ".spot_meta")
    if meta.exists():
        with open(meta) as fh:
            names = fh.readline().strip().split(",")
            vals = [float(v) for v in fh.readline().strip().split(",")]
        if "alpha_ident_rpe" not in names:
            raise ValidationError(
                f"spot meta {meta.name} is missing column 'alpha_ident_rpe'")
        alpha_ident = np.array(vals)
    return MeasurementTrace(
        spot_id=path.stem,
        t=data[:, col["t"]],
        u=data[:, col["u"]],
        T_vol=data[:, col["T_vol"]],
        alpha_ident=alpha_ident,
    )


def ingest_measurements(csv_path) -> list[MeasurementTrace]:
    """Load one measurement CSV or every *.csv in a directory."""
    path = Path(csv_path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise ValidationError(f"no measurement CSVs in {path}")
        return [_read_measurement_file(f) for f in files]
    if not path.exists():
        raise ValidationError(f"measurement file {path} does not exist")
    return [_read_measurement_file(path)]


# ---------------------------------------------------------------------------
# offline identification
# ---------------------------------------------------------------------------

def _output_and_sensitivity(model, alpha, u_seq, t_s, p):
    """Forward-simulate outputs y_k and dy_k/dalpha over the whole trace."""
    steps = len(u_seq)
    if isinstance(model, FullOrderModel):
        M = sps.identity(model.n_f, format="csc") - t_s * model.A.tocsc()
        lu = spla.splu(M)
        solve = lu.solve
        b = model.b(alpha)
        b_grad = model.b_terms.gradient(model._alpha2(alpha))
        c = model.c_vol(alpha)
        c_grad = model.c_terms.gradient(model._alpha2(alpha))
        n = model.n_f
    elif isinstance(model, ReducedModel):
        dm = discretize(model, t_s)
        solve = None
        A_d, b = dm.A_d, dm.b_d(alpha)
        b_grad = dm.b_d_grad(alpha)
        c = dm.c_vol(alpha)
        c_grad = dm.c_vol_grad(alpha).T       # (n, 2)
        n = dm.n
    else:
        raise ValidationError(f"unsupported model type {type(model).__name__}")

    x = np.zeros(n)
    S = np.zeros((n, p))
    y = np.zeros(steps + 1)
    dy = np.zeros((steps + 1, p))
    for k in range(steps):
        u = u_seq[k]
        if solve is not None:
            x = solve(x + t_s * b * u)
            S = solve(S + t_s * b_grad[:, :p] * u)
        else:
            x = A_d @ x + b * u
            S = A_d @ S + b_grad[:, :p] * u
        y[k + 1] = c @ x
        dy[k + 1] = c @ S + c_grad[:, :p].T @ x
    return y, dy


def offline_identify(trace, model, p: int, bounds: bool = True,
                     settings: NlsSettings | None = None) -> np.ndarray:
    """Least-squares fit of the absorption prefactors to a whole trace.

    States are eliminated by forward simulation; only the p prefactors
    are decision variables.  Works with a measurement trace or a
    simulated trace (fitting the noisy output).
    """
    if isinstance(trace, MeasurementTrace):
        t, u, y_meas = trace.t, trace.u, trace.T_vol
    else:
        t, u, y_meas = trace.t, trace.u, trace.y_noisy
    if t[-1] < 0.150 - 1e-9:
        raise ValidationError(
            f"trace covers {t[-1]:.3f} s, identification needs at least 0.150 s")
    t_s = float(t[1] - t[0])
    u_seq = u[:-1]

    domain = model.domain
    if bounds:
        lower, upper = domain.alpha_min[:p], domain.alpha_max[:p]
    else:
        lower = np.full(p, 1e-6)          # keep the absorption physical
        upper = np.full(p, np.inf)
    x0 = domain.midpoint[:p]

    def residual(alpha):
        y, _ = _output_and_sensitivity(model, alpha, u_seq, t_s, p)
        return y[1:] - y_meas[1:]

    def jacobian(alpha):
        _, dy = _output_and_sensitivity(model, alpha, u_seq, t_s, p)
        return dy[1:]

    result = solve_box_nls(residual, jacobian, x0, lower, upper,
                           settings or NlsSettings(max_iter=50))
    return result.x


# ---------------------------------------------------------------------------
# estimator comparison on measurement-style traces
# ---------------------------------------------------------------------------

def compare_estimators(traces: list[MeasurementTrace], full_model: FullOrderModel,
                       rom: ReducedModel, p: int, cfg: dict,
                       exclude_outliers: bool = False,
                       ekf_config: EkfConfig | None = None,
                       mhe_config: MheConfig | None = None) -> ExperimentReport:
    """Run the EKF and the MHE on identical spot traces.

    Errors are measured against a full-order simulation at each spot's
    identified parameters.  Spots whose identified parameters fall
    outside the admissible box count as outliers and can be excluded.
    """
    t_s = cfg["sampling"]["t_s"]
    model = _augmented(rom, p, t_s)
    if ekf_config is None:
        ekf_config = default_ekf_config(model, cfg)
    if mhe_config is None:
        mhe_config = default_mhe_config(model, cfg)
    dom = rom.domain

    runs: dict[str, list[RunErrors]] = {"ekf": [], "mhe": []}
    excluded = {"ekf": 0, "mhe": 0}
    timings: dict[str, list[float]] = {"ekf": [], "mhe": []}
    n_outliers = 0
    t_ref = None

    for trace in traces:
        if trace.alpha_ident is None:
            raise ValidationError(
                f"spot {trace.spot_id} carries no identified parameters")
        alpha = trace.alpha_ident[:p]
        outlier = not (np.all(alpha >= dom.alpha_min[:p])
                       and np.all(alpha <= dom.alpha_max[:p]))
        if outlier:
            n_outliers += 1
            if exclude_outliers:
                continue
        steps = len(trace.t) - 1
        reference = simulate_plant(full_model, alpha, trace.u[:-1], 0.0, steps,
                                   seed=None, t_s=t_s)
        t_ref = reference.t
        for est in ("ekf", "mhe"):
            try:
                if est == "ekf":
                    rec, secs = run_ekf(model, ekf_config, trace.u[:-1],
                                        trace.T_vol, collect_timing=True)
                    timings[est].append(float(np.median(secs)))
                else:
                    rec, secs = run_mhe(model, mhe_config, trace.u[:-1],
                                        trace.T_vol, collect_timing=True)
                    timings[est].append(float(np.median(secs)))
                ref = SimTrace(
                    t=reference.t, u=reference.u, y_clean=reference.y_clean,
                    y_noisy=trace.T_vol, alpha_true=alpha, seed=None,
                    noise_var=0.0, t_s=t_s, t_peak=reference.t_peak,
                    states=reference.states)
                runs[est].append(run_errors(ref, rec, rom))
            except SolverFailure:
                excluded[est] += 1

    metrics = {e: aggregate_errors(runs[e], t_ref) for e in runs}
    descriptor = {
        "name": "measurement_comparison",
        "p": p,
        "n_spots": len(traces),
        "n_outliers": n_outliers,
        "exclude_outliers": exclude_outliers,
    }
    return ExperimentReport(
        scenario=descriptor,
        metrics=metrics,
        seeds=[],
        config_hash=config_hash(cfg),
        step_seconds={e: float(np.median(timings[e])) for e in timings},
        excluded=excluded,
    )
