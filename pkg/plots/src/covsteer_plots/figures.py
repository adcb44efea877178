"""Figure generation from the solver's moments.csv / ensemble.csv files.

Draws, for a chosen pair of state coordinates: the sampled path projections
from the ensemble file, the mean trajectory, and 3-sigma ellipses of the
projected 2x2 covariance blocks at strided nodes. All geometry is computed
before rendering so it can be checked independently of the backend.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "covsteer-plots"


class SchemaError(Exception):
    """A CSV file does not match the documented column contract."""


@dataclass(frozen=True)
class FigureSpec:
    """Which 2-D projection to draw and how densely.

    coords: pair of state-coordinate indices forming the projection plane.
    stride: draw an ellipse every `stride` nodes (>= 1).
    max_paths: cap on the number of sampled paths to overlay.
    out: output image path; the suffix selects SVG or PNG.
    """

    coords: tuple
    out: str
    stride: int = 50
    max_paths: int = 10
    sigma_scale: float = 3.0

    def __post_init__(self):
        if len(self.coords) != 2:
            raise ValueError("coords must be a pair of indices")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        suffix = Path(self.out).suffix.lower()
        if suffix not in (".svg", ".png"):
            raise ValueError(f"unsupported image format {suffix!r} (use .svg or .png)")


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return header, np.asarray(rows)


def _column(header, data, name, path):
    try:
        return data[:, header.index(name)]
    except ValueError:
        raise SchemaError(f"{path}: missing column {name!r}") from None


def _state_dim(header: list[str], prefix: str) -> int:
    pat = re.compile(rf"^{prefix}_(\d+)$")
    dims = [int(m.group(1)) for c in header if (m := pat.match(c))]
    if not dims:
        raise SchemaError(f"no {prefix}_* columns found")
    return max(dims) + 1


def load_moments(path) -> dict:
    """Parse moments.csv: t, z_i, Sigma_i_j (row-major)."""
    header, data = _read_csv(path)
    n = _state_dim(header, "z")
    t = _column(header, data, "t", path)
    z = np.stack([_column(header, data, f"z_{i}", path) for i in range(n)], axis=1)
    Sigma = np.empty((data.shape[0], n, n))
    for i in range(n):
        for j in range(n):
            Sigma[:, i, j] = _column(header, data, f"Sigma_{i}_{j}", path)
    return {"t": t, "z": z, "Sigma": Sigma, "n": n}


def load_ensemble(path) -> dict:
    """Parse ensemble.csv: t, mean_i, cov_i_j, optional path{k}_{i} columns."""
    header, data = _read_csv(path)
    n = _state_dim(header, "mean")
    t = _column(header, data, "t", path)
    mean = np.stack([_column(header, data, f"mean_{i}", path) for i in range(n)], axis=1)
    pat = re.compile(r"^path(\d+)_(\d+)$")
    ids = sorted({int(m.group(1)) for c in header if (m := pat.match(c))})
    paths = []
    for k in ids:
        paths.append(
            np.stack([_column(header, data, f"path{k}_{i}", path) for i in range(n)], axis=1)
        )
    return {"t": t, "mean": mean, "paths": paths, "n": n}


def ellipse_axes(cov2: np.ndarray, scale: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Semi-axis lengths (scale * sqrt(eigenvalues), ascending) and the
    corresponding unit directions of a 2x2 covariance block."""
    cov2 = 0.5 * (cov2 + cov2.T)
    lam, V = np.linalg.eigh(cov2)
    return scale * np.sqrt(np.maximum(lam, 0.0)), V


def ellipse_polyline(center: np.ndarray, cov2: np.ndarray, scale: float = 3.0, n_segments: int = 128) -> np.ndarray:
    """Closed polyline of the `scale`-sigma ellipse of a 2x2 covariance block.

    Semi-axes are scale * sqrt(eigenvalues); a rank-deficient block collapses
    the polyline to a segment. The sample angles include the axis directions
    exactly (n_segments is rounded up to a multiple of 4), so the polyline
    attains the semi-axis lengths. Returns (n_segments + 1, 2) with the first
    point repeated to close the loop.
    """
    axes, V = ellipse_axes(cov2, scale)
    n_segments = 4 * max(1, -(-n_segments // 4))
    theta = 2.0 * np.pi * np.arange(n_segments + 1) / n_segments
    circle = np.stack([np.cos(theta), np.sin(theta)])
    return (center[:, None] + V @ (axes[:, None] * circle)).T


def figure_geometry(moments: dict, ensemble: dict, spec: FigureSpec) -> dict:
    """All drawing data (mean curve, ellipses, path projections), pre-render."""
    i, j = spec.coords
    n = moments["n"]
    if not (0 <= i < n and 0 <= j < n):
        raise SchemaError(f"coordinate pair {spec.coords} outside state dimension {n}")
    if ensemble["n"] != n:
        raise SchemaError("moments and ensemble files disagree on the state dimension")
    sel = np.array([i, j])
    idx = list(range(0, moments["t"].shape[0], spec.stride))
    if idx[-1] != moments["t"].shape[0] - 1:
        idx.append(moments["t"].shape[0] - 1)
    ellipses = []
    for k in idx:
        block = moments["Sigma"][k][np.ix_(sel, sel)]
        center = moments["z"][k, sel]
        semi_axes, directions = ellipse_axes(block, spec.sigma_scale)
        ellipses.append(
            {
                "node": k,
                "center": center,
                "cov": block,
                "semi_axes": semi_axes,
                "directions": directions,
                "polyline": ellipse_polyline(center, block, spec.sigma_scale),
            }
        )
    return {
        "mean": moments["z"][:, sel],
        "ellipses": ellipses,
        "paths": [p[:, sel] for p in ensemble["paths"][: spec.max_paths]],
        "labels": (f"x{i}", f"x{j}"),
    }


def render(geometry: dict, spec: FigureSpec) -> str:
    fig, ax = plt.subplots(figsize=(6.0, 5.4))
    for p in geometry["paths"]:
        ax.plot(p[:, 0], p[:, 1], color="0.65", lw=0.5, alpha=0.7, zorder=1)
    for e in geometry["ellipses"]:
        poly = e["polyline"]
        ax.plot(poly[:, 0], poly[:, 1], color="tab:blue", lw=0.9, zorder=2)
    m = geometry["mean"]
    ax.plot(m[:, 0], m[:, 1], color="tab:red", lw=1.6, zorder=3, label="mean")
    ax.set_xlabel(geometry["labels"][0])
    ax.set_ylabel(geometry["labels"][1])
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(spec.out, metadata={"Date": None} if spec.out.endswith(".svg") else None)
    plt.close(fig)
    return spec.out


def plot_ensemble(moments_csv, ensemble_csv, spec: FigureSpec) -> str:
    """Produce the figure; raises SchemaError on contract violations."""
    moments = load_moments(moments_csv)
    ensemble = load_ensemble(ensemble_csv)
    geometry = figure_geometry(moments, ensemble, spec)
    return render(geometry, spec)
