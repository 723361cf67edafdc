"""Render figures from retitherm CSV artifacts.

The primary package writes three documented CSV shapes: simulated or
measured traces, per-step estimate records, and per-step error tables
from benchmark ensembles.  This module turns them into deterministic
images.  It reads only the CSV files; it never imports the simulation
package.

Figure kinds:
  trace        temperature output(s) over time from a trace CSV
  convergence  parameter estimates over time from estimate records
  error        log-scale mean error curves from an error table
  tuning-sweep grouped bars of error sums across labeled runs
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import pandas as pd
import yaml

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("trace", "convergence", "error", "tuning-sweep")

# fixed style so rerendering the same spec gives the same image
_RC = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "retitherm",
}


class PlotError(Exception):
    """Raised for unusable specs or CSVs; exit code 2 from the CLI."""


@dataclass
class FigureSpec:
    """One figure: a kind, labeled input CSVs, and an output path."""

    kind: str
    inputs: list[dict]                  # each {"path": ..., "label": ...}
    output: str
    title: str = ""
    reference: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"unknown figure kind '{self.kind}', "
                            f"expected one of {', '.join(KINDS)}")
        if not self.inputs:
            raise PlotError("figure spec lists no input CSVs")
        for item in self.inputs:
            if "path" not in item:
                raise PlotError("every input needs a 'path'")
            item.setdefault("label", Path(item["path"]).stem)


def load_spec(path) -> list[FigureSpec]:
    """Parse a YAML spec file into one or more figure specs."""
    path = Path(path)
    if not path.exists():
        raise PlotError(f"spec file {path} does not exist")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        raise PlotError(f"spec file {path} is empty")
    entries = doc.get("figures", [doc]) if isinstance(doc, dict) else doc
    if not entries:
        raise PlotError(f"spec file {path} defines no figures")
    return [FigureSpec(**entry) for entry in entries]


def _read_csv(path, required: tuple[str, ...]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"input CSV {path} does not exist")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise PlotError(f"input CSV {path} is empty") from None
    if frame.empty:
        raise PlotError(f"input CSV {path} has a header but no rows")
    for col in required:
        if col not in frame.columns:
            raise PlotError(f"input CSV {path} is missing column '{col}'")
    return frame


def _prefixed(frame: pd.DataFrame, prefix: str) -> list[str]:
    return [c for c in frame.columns if c.startswith(prefix)]


def _plot_trace(spec: FigureSpec, ax) -> None:
    for item in spec.inputs:
        frame = _read_csv(item["path"], ("t",))
        if "T_vol" in frame.columns:
            ax.plot(frame["t"], frame["T_vol"],
                    label=f"{item['label']} T_vol", lw=1.0)
        elif "y_clean" in frame.columns:
            if "y_noisy" in frame.columns:
                ax.plot(frame["t"], frame["y_noisy"],
                        label=f"{item['label']} y_noisy", lw=0.5, alpha=0.6)
            ax.plot(frame["t"], frame["y_clean"],
                    label=f"{item['label']} y_clean", lw=1.2)
        elif "y_hat" in frame.columns:
            ax.plot(frame["t"], frame["y_meas"],
                    label=f"{item['label']} y_meas", lw=0.5, alpha=0.6)
            ax.plot(frame["t"], frame["y_hat"],
                    label=f"{item['label']} y_hat", lw=1.2)
        else:
            raise PlotError(
                f"input CSV {item['path']} is missing column 'T_vol' "
                "(or 'y_clean'/'y_hat' for simulated traces)")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("temperature [K]")


def _plot_convergence(spec: FigureSpec, ax) -> None:
    for item in spec.inputs:
        frame = _read_csv(item["path"], ("t", "alpha_hat_1"))
        for col in _prefixed(frame, "alpha_hat_"):
            suffix = col.removeprefix("alpha_hat_")
            ax.plot(frame["t"], frame[col],
                    label=f"{item['label']} alpha_{suffix}", lw=1.2)
    for j, ref in enumerate(spec.reference, start=1):
        ax.axhline(ref, color="k", ls="--", lw=0.8,
                   label=f"reference alpha_{j}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("estimated prefactor")


def _plot_error(spec: FigureSpec, ax) -> None:
    for item in spec.inputs:
        frame = _read_csv(item["path"], ("t", "e_y"))
        cols = [c for c in _prefixed(frame, "e_")]
        for col in cols:
            ax.semilogy(frame["t"], frame[col],
                        label=f"{item['label']} {col}", lw=1.0)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("mean relative error")


def _plot_tuning_sweep(spec: FigureSpec, ax) -> None:
    sums = {}
    metrics = None
    for item in spec.inputs:
        frame = _read_csv(item["path"], ("t", "e_y"))
        cols = sorted(_prefixed(frame, "e_"))
        if metrics is None:
            metrics = cols
        sums[item["label"]] = [float(frame[c].sum()) for c in metrics]
    width = 0.8 / len(sums)
    for i, (label, vals) in enumerate(sums.items()):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, vals, width=width, label=label)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylabel("error sum over steps")


_RENDERERS = {
    "trace": _plot_trace,
    "convergence": _plot_convergence,
    "error": _plot_error,
    "tuning-sweep": _plot_tuning_sweep,
}


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the written image path.

    The output file is only created after every input parsed, so a bad
    CSV never leaves a stale or partial image behind.
    """
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots()
        try:
            _RENDERERS[spec.kind](spec, ax)
            if spec.title:
                ax.set_title(spec.title)
            ax.legend(loc="best", fontsize=8)
            out = Path(spec.output)
            out.parent.mkdir(parents=True, exist_ok=True)
            # strip volatile metadata so identical specs give identical bytes
            meta = {"Date": None} if out.suffix == ".svg" else \
                {"Software": "retitherm-plots"}
            fig.savefig(out, metadata=meta)
        finally:
            plt.close(fig)
    return out


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="retitherm-plots",
        description="Render figures from retitherm CSV artifacts.")
    parser.add_argument("--spec", required=True,
                        help="YAML file describing one or more figures")
    args = parser.parse_args(argv)
    try:
        for spec in load_spec(args.spec):
            path = render(spec)
            print(f"wrote {path}")
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
