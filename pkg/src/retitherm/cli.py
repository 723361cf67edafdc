"""Command-line interface.

Subcommands cover the whole workflow: build the full-order model,
reduce it, simulate traces, run an estimator on a trace, benchmark
estimator ensembles, and identify parameters offline.  Exit codes:
0 success, 2 validation error, 3 solver failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .config import config_hash, load_config, save_config
from .ekf import default_ekf_config, run_ekf, write_estimate_csv
from .errors import SolverFailure, ValidationError
from .mhe import default_mhe_config, run_mhe
from .pmor import build_rom, load_rom, rom_error_sweep, save_rom, sweep_to_csv
from .plant import augment, discretize, read_sim_csv, simulate_plant, \
    write_sim_csv
from .thermal import absorbed_power_fraction, build_full_model


def _common(func):
    func = click.option("--config", "config_path", type=click.Path(exists=True),
                        default=None, help="YAML config overriding defaults.")(func)
    func = click.option("--seed", type=int, default=0, show_default=True,
                        help="Seed for any random draws.")(func)
    func = click.option("--out", "out_dir", type=click.Path(), default=".",
                        show_default=True, help="Output directory.")(func)
    return func


def _outdir(out_dir) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def cli():
    """Retinal heating models and joint state/parameter estimators."""


@cli.command()
@_common
def build(config_path, seed, out_dir):
    """Build the full-order model and report its key figures."""
    cfg = load_config(config_path)
    model = build_full_model(cfg)
    frac = absorbed_power_fraction(model.absorption, model.stack)
    click.echo(f"full-order states: {model.n_f}")
    click.echo(f"absorbed power fraction at mean alpha: {frac:.6f}")
    click.echo(f"config hash: {config_hash(cfg)}")
    out = _outdir(out_dir)
    save_config(cfg, out / "config_resolved.yaml")
    click.echo(f"wrote {out / 'config_resolved.yaml'}")


@cli.command()
@_common
@click.option("--params", "p", type=click.IntRange(1, 2), default=1,
              show_default=True, help="Number of estimated prefactors.")
@click.option("--check/--no-check", default=False,
              help="Run an accuracy sweep against the full model.")
def reduce(config_path, seed, out_dir, p, check):
    """Build a reduced model and save its archive."""
    cfg = load_config(config_path)
    full = build_full_model(cfg)
    rom = build_rom(full, p, cfg)
    out = _outdir(out_dir)
    path = out / f"rom_{p}p.npz"
    save_rom(rom, path)
    click.echo(f"reduced order n={rom.n}, d={rom.d}, p={rom.p}")
    click.echo(f"wrote {path}")
    if check:
        dom = rom.domain
        grid = [np.array(a) for a in
                np.ndindex(*[3] * p)]
        alphas = [dom.alpha_min + (dom.alpha_max - dom.alpha_min) * g / 2
                  for g in grid]
        if p == 1:
            alphas = [np.array([a[0], full.absorption.alpha_ch]) for a in alphas]
        rows = rom_error_sweep(full, rom, alphas)
        sweep_to_csv(rows, out / f"rom_{p}p_sweep.csv")
        worst = max(max(r["max_rel_err_vol"], r["max_rel_err_peak"])
                    for r in rows)
        click.echo(f"worst relative output error over sweep: {worst:.3e}")
        click.echo(f"wrote {out / f'rom_{p}p_sweep.csv'}")


@cli.command()
@_common
@click.option("--alpha", "alpha", type=float, multiple=True, required=True,
              help="True prefactor(s); pass twice for 2 parameters.")
@click.option("--input", "input_kind", type=click.Choice(["constant",
              "staircase"]), default="constant", show_default=True)
@click.option("--steps", type=int, default=400, show_default=True)
@click.option("--noise-var", type=float, default=None,
              help="Measurement noise variance (default from config).")
def simulate(config_path, seed, out_dir, alpha, input_kind, steps, noise_var):
    """Simulate a full-order measurement trace."""
    cfg = load_config(config_path)
    full = build_full_model(cfg)
    t_s = cfg["sampling"]["t_s"]
    var = cfg["noise"]["meas_var"] if noise_var is None else noise_var
    signal = harness.make_input(input_kind, cfg)
    trace = simulate_plant(full, list(alpha), signal.samples(steps, t_s), var,
                           steps, seed=seed, t_s=t_s)
    out = _outdir(out_dir)
    path = out / "trace.csv"
    write_sim_csv(path, trace)
    click.echo(f"wrote {path} ({steps} steps, noise var {var})")


@cli.command()
@_common
@click.option("--trace", "trace_path", type=click.Path(exists=True),
              required=True, help="Simulated trace CSV.")
@click.option("--rom", "rom_path", type=click.Path(exists=True), required=True,
              help="Reduced-model archive from `reduce`.")
@click.option("--estimator", type=click.Choice(["ekf", "mhe"]), default="ekf",
              show_default=True)
@click.option("--unconstrained", is_flag=True,
              help="Disable the parameter box constraints (MHE only).")
def estimate(config_path, seed, out_dir, trace_path, rom_path, estimator,
             unconstrained):
    """Run one estimator over a recorded trace."""
    cfg = load_config(config_path)
    rom = load_rom(rom_path)
    trace = read_sim_csv(trace_path)
    model = augment(discretize(rom, trace.t_s), trace.p)
    if estimator == "ekf":
        record = run_ekf(model, default_ekf_config(model, cfg),
                         trace.u[:-1], trace.y_noisy)
    else:
        mcfg = default_mhe_config(model, cfg, constrained=not unconstrained)
        record = run_mhe(model, mcfg, trace.u[:-1], trace.y_noisy)
    out = _outdir(out_dir)
    path = out / f"estimate_{estimator}.csv"
    write_estimate_csv(path, record)
    click.echo(f"wrote {path}")
    click.echo(f"final alpha estimate: {record.alpha_hat[-1]}")


@cli.command()
@_common
@click.option("--params", "p", type=click.IntRange(1, 2), default=1,
              show_default=True)
@click.option("--alpha", type=float, multiple=True, required=True)
@click.option("--realizations", type=int, default=20, show_default=True)
@click.option("--steps", type=int, default=150, show_default=True)
@click.option("--input", "input_kind", type=click.Choice(["constant",
              "staircase"]), default="constant", show_default=True)
def bench(config_path, seed, out_dir, p, alpha, realizations, steps,
          input_kind):
    """Monte-Carlo estimator comparison; writes error tables and a summary."""
    cfg = load_config(config_path)
    full = build_full_model(cfg)
    rom = build_rom(full, p, cfg)
    scenario = harness.Scenario(
        full_model=full, rom=rom, p=p, alpha_true=np.array(alpha),
        signal=harness.make_input(input_kind, cfg), steps=steps,
        noise_var=cfg["noise"]["meas_var"], t_s=cfg["sampling"]["t_s"],
        cfg=cfg, name=f"{p}p_{input_kind}")
    report = harness.run_ensemble(scenario, realizations, seed=seed)
    paths = harness.write_report_csvs(report, _outdir(out_dir))
    for path in paths:
        click.echo(f"wrote {path}")
    for est, metrics in report.metrics.items():
        sums = ", ".join(f"{k}={v:.3f}" for k, v in sorted(metrics.sums.items()))
        click.echo(f"{est}: {sums}")
    click.echo(f"median step seconds: {report.step_seconds}")


@cli.command()
@_common
@click.option("--trace", "trace_path", type=click.Path(exists=True),
              required=True, help="Measurement CSV (t,u,T_vol) or trace CSV.")
@click.option("--rom", "rom_path", type=click.Path(exists=True), default=None,
              help="Reduced-model archive; omit to identify with the full model.")
@click.option("--params", "p", type=click.IntRange(1, 2), default=1,
              show_default=True)
def identify(config_path, seed, out_dir, trace_path, rom_path, p):
    """Offline least-squares identification of the absorption prefactors."""
    cfg = load_config(config_path)
    with open(trace_path) as fh:
        header = fh.readline().strip().split(",")
    if "T_vol" in header:
        trace = harness.ingest_measurements(trace_path)[0]
    else:
        trace = read_sim_csv(trace_path)
    model = load_rom(rom_path) if rom_path else build_full_model(cfg)
    alpha = harness.offline_identify(trace, model, p)
    click.echo("identified alpha: " + " ".join(f"{a:.6f}" for a in alpha))


def main():
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(1)
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(2)
    except SolverFailure as exc:
        click.echo(f"solver failure: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
