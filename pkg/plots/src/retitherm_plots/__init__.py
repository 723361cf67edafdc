"""Figure rendering for retitherm CSV artifacts."""

from .render import FigureSpec, PlotError, load_spec, render

__all__ = ["FigureSpec", "PlotError", "load_spec", "render"]
