"""Shared numerical kernels: fixed-grid RK4 integration, SPD matrix
functions, symmetric pseudo-inverses, and finite-difference gradients.

All operations are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EvaluationError, IntegrationDivergedError, NumericalDomainError

_EPS = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of a horizon [t0, t1] into n_steps intervals.

    Nodes are t_i = t0 + i*(t1-t0)/n_steps for i = 0..n_steps.
    """

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"t1 must exceed t0 (got [{self.t0}, {self.t1}])")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2 (got {self.n_steps})")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.n_steps + 1)

    def half_index(self, t: float) -> int:
        """Index of t on the half-step grid t0 + k*dt/2, k = 0..2*n_steps.

        Exact for RK4 stage times; used for O(1) lookups of precomputed
        coefficient tables.
        """
        k = int(round(2.0 * (t - self.t0) / self.dt))
        return min(max(k, 0), 2 * self.n_steps)


@dataclass
class TimeIndexedMatrix:
    """A matrix- (or vector-) valued function of time stored at grid nodes.

    ``values`` has shape (n_steps+1, ...); evaluation between nodes is
    piecewise-linear per entry, and evaluation at a node returns the stored
    value exactly.
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.n_nodes:
            raise ValueError(
                f"expected {self.grid.n_nodes} node values, got {self.values.shape[0]}"
            )

    def at(self, t: float) -> np.ndarray:
        g = self.grid
        s = (t - g.t0) / g.dt
        i = int(np.floor(s))
        i = min(max(i, 0), g.n_steps - 1)
        w = s - i
        if abs(w) < 1e-12:
            return self.values[i]
        if abs(w - 1.0) < 1e-12:
            return self.values[i + 1]
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]

    def half_values(self) -> np.ndarray:
        """Values on the half-step grid (2*n_steps+1, ...): nodes interleaved
        with interval midpoints (the piecewise-linear average)."""
        v = self.values
        out = np.empty((2 * self.grid.n_steps + 1,) + v.shape[1:], dtype=float)
        out[0::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        return out


def integrate_ode(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Integrate dy/dt = rhs(t, y) with classical RK4, node to node.

    Returns the trajectory (n_steps+1, *y0.shape); trajectory[0] is y0
    exactly. Raises IntegrationDivergedError naming the first node where a
    non-finite value appears.
    """
    y0 = np.asarray(y0, dtype=float)
    nodes = grid.nodes
    dt = grid.dt
    out = np.empty((grid.n_nodes,) + y0.shape, dtype=float)
    out[0] = y0
    y = y0
    for i in range(grid.n_steps):
        t = nodes[i]
        tm = t + 0.5 * dt
        k1 = rhs(t, y)
        k2 = rhs(tm, y + 0.5 * dt * k1)
        k3 = rhs(tm, y + 0.5 * dt * k2)
        k4 = rhs(nodes[i + 1], y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationDivergedError(i + 1, nodes[i + 1])
        out[i + 1] = y
    return out


def integrate_ode_indexed(
    rhs: Callable[[int, np.ndarray], np.ndarray],
    y0: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """RK4 variant whose rhs is addressed by half-grid index k = 0..2*n_steps
    (node i is k = 2i, the midpoint of step i is k = 2i+1).

    Avoids time-to-index conversion in hot loops where coefficients are
    precomputed on the half grid. Semantics otherwise match integrate_ode.
    """
    y0 = np.asarray(y0, dtype=float)
    dt = grid.dt
    sixth = dt / 6.0
    half = 0.5 * dt
    out = np.empty((grid.n_nodes,) + y0.shape, dtype=float)
    out[0] = y0
    y = y0
    for i in range(grid.n_steps):
        k = 2 * i
        k1 = rhs(k, y)
        k2 = rhs(k + 1, y + half * k1)
        k3 = rhs(k + 1, y + half * k2)
        k4 = rhs(k + 2, y + dt * k3)
        y = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationDivergedError(i + 1, grid.nodes[i + 1])
        out[i + 1] = y
    return out


def _check_symmetric(M: np.ndarray, rel_tol: float, what: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NumericalDomainError(f"{what}: expected a square matrix, got {M.shape}")
    scale = max(np.linalg.norm(M), 1e-300)
    if np.linalg.norm(M - M.T) > rel_tol * scale:
        raise NumericalDomainError(
            f"{what}: matrix is not symmetric within {rel_tol:g} relative"
        )
    return 0.5 * (M + M.T)


def sqrtm_spd(M: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Principal square root of a symmetric positive-definite matrix.

    Computed by symmetric eigendecomposition; the result S satisfies
    S @ S == M and is itself SPD.
    """
    Ms = _check_symmetric(M, sym_tol, "sqrtm_spd")
    lam, V = np.linalg.eigh(Ms)
    if lam[0] <= 0.0:
        raise NumericalDomainError(
            f"sqrtm_spd: matrix not positive definite (smallest eigenvalue {lam[0]:g})"
        )
    S = (V * np.sqrt(lam)) @ V.T
    return 0.5 * (S + S.T)


def pinv_sym(M: np.ndarray, rank_tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix.

    Eigenvalues below rank_tol * lambda_max are treated as zero. A negative
    eigenvalue beyond that tolerance is a domain error.
    """
    Ms = _check_symmetric(M, 1e-8, "pinv_sym")
    lam, V = np.linalg.eigh(Ms)
    lam_max = max(lam[-1], 0.0)
    cut = rank_tol * lam_max
    if lam[0] < -max(cut, rank_tol):
        raise NumericalDomainError(
            f"pinv_sym: negative eigenvalue {lam[0]:g} beyond tolerance"
        )
    inv = np.where(lam > cut, 1.0 / np.where(lam > cut, lam, 1.0), 0.0)
    P = (V * inv) @ V.T
    return 0.5 * (P + P.T)


def default_fd_step(x: np.ndarray) -> float:
    """Central-difference step h = eps^(1/3) * max(1, ||x||_inf)."""
    x = np.asarray(x, dtype=float)
    scale = max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    return _EPS ** (1.0 / 3.0) * scale


def fd_gradient(
    phi: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar map.

    Component i is (phi(x + h*e_i) - phi(x - h*e_i)) / (2h).
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = default_fd_step(x)
    if h <= 0.0:
        raise ValueError("fd step h must be positive")
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = phi(xp)
        fm = phi(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad = xp if not np.isfinite(fp) else xm
            raise EvaluationError(f"non-finite function value at probe point {bad}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
