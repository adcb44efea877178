"""Batch figure generation for covariance-steering results."""

from .figures import (
    FigureSpec,
    SchemaError,
    ellipse_axes,
    ellipse_polyline,
    figure_geometry,
    plot_ensemble,
)

__version__ = "0.1.0"
