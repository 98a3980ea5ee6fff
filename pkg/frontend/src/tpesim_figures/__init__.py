"""Figure rendering over the simulation harness's result CSVs."""

from .io import SchemaError, read_replicates, read_results
from .render import FigureSpec, METRICS, render, render_zipper, zipper_data

__all__ = [
    "SchemaError",
    "read_replicates",
    "read_results",
    "FigureSpec",
    "METRICS",
    "render",
    "render_zipper",
    "zipper_data",
]
