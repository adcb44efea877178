"""Exact solver for linear covariance steering with drift and
linear-plus-quadratic state cost.

The terminal-covariance constraint is enforced through a coupled pair of
matrix Riccati equations whose boundary value has a closed-form expression in
the blocks of a Hamiltonian state-transition matrix; the mean is steered by a
Pontryagin two-point boundary-value solve. Both reduce to initial-value
problems integrated with RK4 on the shared grid. Coefficients are tabulated
once per problem on the half-step grid so the inner loops index instead of
interpolating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    ControllabilityError,
    ShootingResidualError,
    SteeringResidualError,
)
from .models import GaussianMarginal
from .numerics import TimeGrid, TimeIndexedMatrix, integrate_ode_indexed, sqrtm_spd

_COND_LIMIT = 1e12


def _guarded_inverse(M: np.ndarray, what: str) -> np.ndarray:
    if np.linalg.cond(M) > _COND_LIMIT:
        raise ControllabilityError(f"{what} is near-singular (cond > {_COND_LIMIT:g})")
    return np.linalg.solve(M, np.eye(M.shape[0]))


def _half_tables(
    Abar: TimeIndexedMatrix,
    B: TimeIndexedMatrix,
    Q: TimeIndexedMatrix,
    abar: TimeIndexedMatrix | None = None,
    r: TimeIndexedMatrix | None = None,
) -> dict:
    """Half-grid coefficient tables, including the Hamiltonian block matrix
    M = [[A, -BB'], [-Q, -A']] and, when drift terms are given, the forcing
    vector c = [a; -r]."""
    A_h = Abar.half_values()
    B_h = B.half_values()
    Q_h = Q.half_values()
    BBt_h = B_h @ np.swapaxes(B_h, 1, 2)
    n = A_h.shape[1]
    M_h = np.empty((A_h.shape[0], 2 * n, 2 * n))
    M_h[:, :n, :n] = A_h
    M_h[:, :n, n:] = -BBt_h
    M_h[:, n:, :n] = -Q_h
    M_h[:, n:, n:] = -np.swapaxes(A_h, 1, 2)
    tables = {"A": A_h, "BBt": BBt_h, "Q": Q_h, "M": M_h, "n": n}
    if abar is not None and r is not None:
        c_h = np.empty((A_h.shape[0], 2 * n))
        c_h[:, :n] = abar.half_values()
        c_h[:, n:] = -r.half_values()
        tables["a"] = abar.half_values()
        tables["c"] = c_h
    return tables


@dataclass
class LinearSteeringProblem:
    """Data of one linear covariance steering subproblem.

    Cost 0.5||u||^2 + 0.5 x'Q(t)x + x'r(t); dynamics
    dX = A(t)X dt + a(t) dt + B(t)(u dt + sqrt(eps) dW); Gaussian boundary
    marginals at both ends of the grid. Q is symmetrized on construction.
    """

    grid: TimeGrid
    Abar: TimeIndexedMatrix
    abar: TimeIndexedMatrix
    B: TimeIndexedMatrix
    Q: TimeIndexedMatrix
    r: TimeIndexedMatrix
    eps: float
    rho0: GaussianMarginal
    rho1: GaussianMarginal

    def __post_init__(self):
        n = self.rho0.dim
        nn = self.grid.n_nodes
        shapes = {
            "Abar": (nn, n, n),
            "abar": (nn, n),
            "Q": (nn, n, n),
            "r": (nn, n),
        }
        for name, want in shapes.items():
            got = getattr(self, name).values.shape
            if got != want:
                raise ConfigError(f"{name} has shape {got}, expected {want}")
        if self.B.values.ndim != 3 or self.B.values.shape[:2] != (nn, n):
            raise ConfigError(f"B has shape {self.B.values.shape}, expected ({nn}, {n}, p)")
        if self.rho1.dim != n:
            raise ConfigError("boundary marginals have mismatched dimensions")
        if self.eps <= 0.0:
            raise ConfigError("eps must be positive")
        Qv = self.Q.values
        self.Q = TimeIndexedMatrix(self.grid, 0.5 * (Qv + np.swapaxes(Qv, 1, 2)))
        self._tables = None

    @property
    def state_dim(self) -> int:
        return self.rho0.dim

    @property
    def input_dim(self) -> int:
        return self.B.values.shape[2]

    def half_tables(self) -> dict:
        if self._tables is None:
            self._tables = _half_tables(self.Abar, self.B, self.Q, self.abar, self.r)
        return self._tables


@dataclass
class TransitionData:
    """Terminal-time transition blocks and the full backward family.

    ``family[i]`` is the 2n x 2n transition matrix from node t_i to the final
    time; the Phi blocks are those of family[0].
    """

    Phi11: np.ndarray
    Phi12: np.ndarray
    Phi21: np.ndarray
    Phi22: np.ndarray
    family: np.ndarray


@dataclass
class RiccatiSolution:
    Pi: TimeIndexedMatrix
    H: Optional[TimeIndexedMatrix] = None


@dataclass
class MeanSolution:
    x_star: np.ndarray
    v_star: np.ndarray
    lam: np.ndarray
    lambda0: np.ndarray


@dataclass
class AffinePolicy:
    """Affine state feedback u = K(t) X + d(t), stored at grid nodes."""

    grid: TimeGrid
    K: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        if self.K.ndim != 3 or self.d.ndim != 2:
            raise ConfigError("K must be (nodes, p, n) and d must be (nodes, p)")
        if self.K.shape[0] != self.grid.n_nodes or self.d.shape[0] != self.grid.n_nodes:
            raise ConfigError("policy node count does not match the grid")
        if self.K.shape[1] != self.d.shape[1]:
            raise ConfigError("K and d disagree on the input dimension")
        if not (np.all(np.isfinite(self.K)) and np.all(np.isfinite(self.d))):
            raise ConfigError("policy contains non-finite entries")


def _transition_from_tables(tables: dict, grid: TimeGrid) -> TransitionData:
    M_h = tables["M"]
    n = tables["n"]
    last = 2 * grid.n_steps

    # run in reversed time so RK4 marches forward: dPsi/dsigma = Psi M(tau)
    def rhs(k, Y):
        return Y @ M_h[last - k]

    traj = integrate_ode_indexed(rhs, np.eye(2 * n), grid)
    family = traj[::-1].copy()
    Phi = family[0]
    return TransitionData(
        Phi11=Phi[:n, :n],
        Phi12=Phi[:n, n:],
        Phi21=Phi[n:, :n],
        Phi22=Phi[n:, n:],
        family=family,
    )


def transition_blocks(
    Abar: TimeIndexedMatrix,
    B: TimeIndexedMatrix,
    Q: TimeIndexedMatrix,
    grid: TimeGrid,
) -> TransitionData:
    """Transition data of the Hamiltonian system [[A, -BB'], [-Q, -A']].

    The family Phi(t1, tau) at every node tau comes from a single backward
    sweep of the adjoint equation from the identity at the final time.
    """
    return _transition_from_tables(_half_tables(Abar, B, Q), grid)


def riccati_boundary_init(
    Sigma0: np.ndarray,
    Sigma1: np.ndarray,
    eps: float,
    Phi11: np.ndarray,
    Phi12: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form boundary value of the coupled Riccati pair.

    Returns (Pi0, H0) with Pi0 + H0 = eps * Sigma0^{-1} holding exactly by
    construction. Raises ControllabilityError when the Phi12 block is
    near-singular (the pair (A, B) cannot steer over this horizon).
    """
    inv_Phi12 = _guarded_inverse(Phi12, "transition block Phi12")
    inv_S0 = _guarded_inverse(Sigma0, "initial covariance")
    inv_S0 = 0.5 * (inv_S0 + inv_S0.T)
    S0_half = sqrtm_spd(Sigma0)
    S0_half_inv = _guarded_inverse(S0_half, "initial covariance square root")

    n = Sigma0.shape[0]
    core = S0_half @ inv_Phi12 @ Sigma1 @ inv_Phi12.T @ S0_half
    inner = 0.25 * eps**2 * np.eye(n) + 0.5 * (core + core.T)
    inner_sqrt = sqrtm_spd(inner)

    Pi0 = 0.5 * eps * inv_S0 - inv_Phi12 @ Phi11 - S0_half_inv @ inner_sqrt @ S0_half_inv
    Pi0 = 0.5 * (Pi0 + Pi0.T)
    H0 = eps * inv_S0 - Pi0
    return Pi0, H0


def _riccati_from_tables(
    P0: np.ndarray,
    tables: dict,
    grid: TimeGrid,
    quad_sign: float,
    const_sign: float,
) -> TimeIndexedMatrix:
    """Integrate -Pdot = A'P + PA + quad_sign*P BB' P + const_sign*Q forward,
    symmetrizing every node."""
    A_h = tables["A"]
    BBt_h = tables["BBt"]
    Q_h = tables["Q"]

    def rhs(k, P):
        A = A_h[k]
        return -(
            A.T @ P + P @ A + quad_sign * (P @ BBt_h[k] @ P) + const_sign * Q_h[k]
        )

    traj = integrate_ode_indexed(rhs, 0.5 * (P0 + P0.T), grid)
    traj = 0.5 * (traj + np.swapaxes(traj, 1, 2))
    return TimeIndexedMatrix(grid, traj)


def integrate_riccati(
    Pi0: np.ndarray,
    Abar: TimeIndexedMatrix,
    B: TimeIndexedMatrix,
    Q: TimeIndexedMatrix,
    grid: TimeGrid,
) -> TimeIndexedMatrix:
    """Integrate -Pidot = A'Pi + Pi A - Pi BB' Pi + Q forward from Pi(t0)."""
    return _riccati_from_tables(Pi0, _half_tables(Abar, B, Q), grid, -1.0, 1.0)


def integrate_riccati_h(
    H0: np.ndarray,
    Abar: TimeIndexedMatrix,
    B: TimeIndexedMatrix,
    Q: TimeIndexedMatrix,
    grid: TimeGrid,
) -> TimeIndexedMatrix:
    """Integrate the companion equation -Hdot = A'H + HA + H BB' H - Q
    forward from H(t0). Used for the boundary-identity diagnostic."""
    return _riccati_from_tables(H0, _half_tables(Abar, B, Q), grid, 1.0, -1.0)


def default_mean_tol(m1: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.linalg.norm(m1)))


def _mean_from_tables(
    tables: dict,
    Bv: np.ndarray,
    m0: np.ndarray,
    m1: np.ndarray,
    grid: TimeGrid,
    blocks: TransitionData,
    mean_tol: float,
) -> MeanSolution:
    n = tables["n"]
    M_h = tables["M"]
    c_h = tables["c"]
    a_nodes = tables["a"][0::2]
    r_nodes = -tables["c"][0::2, n:]

    fam = blocks.family
    integrand = np.einsum("kij,kj->ki", fam[:, :n, :n], a_nodes) - np.einsum(
        "kij,kj->ki", fam[:, :n, n:], r_nodes
    )
    drift_integral = np.trapezoid(integrand, dx=grid.dt, axis=0)

    inv_Phi12 = _guarded_inverse(blocks.Phi12, "transition block Phi12")
    lambda0 = inv_Phi12 @ (m1 - blocks.Phi11 @ m0 - drift_integral)

    def rhs(k, y):
        return M_h[k] @ y + c_h[k]

    def shoot(lam0):
        return integrate_ode_indexed(rhs, np.concatenate([m0, lam0]), grid)

    traj = shoot(lambda0)
    residual = traj[-1, :n] - m1
    # the costate-to-endpoint map is exactly affine: one re-shoot removes the
    # trapezoid quadrature bias in lambda0
    if np.linalg.norm(residual) > 1e-14 * (1.0 + np.linalg.norm(m1)):
        lambda0 = lambda0 - inv_Phi12 @ residual
        traj = shoot(lambda0)
        residual = traj[-1, :n] - m1

    if np.linalg.norm(residual) > mean_tol:
        raise ShootingResidualError(
            f"terminal mean residual {np.linalg.norm(residual):.3e} exceeds "
            f"{mean_tol:.3e}; re-solve with a refined grid"
        )

    x_star = traj[:, :n]
    lam = traj[:, n:]
    v_star = -np.einsum("kji,kj->ki", Bv, lam)
    return MeanSolution(x_star=x_star, v_star=v_star, lam=lam, lambda0=lambda0)


def solve_mean(
    Abar: TimeIndexedMatrix,
    abar: TimeIndexedMatrix,
    B: TimeIndexedMatrix,
    Q: TimeIndexedMatrix,
    r: TimeIndexedMatrix,
    m0: np.ndarray,
    m1: np.ndarray,
    grid: TimeGrid,
    blocks: TransitionData,
    mean_tol: float | None = None,
) -> MeanSolution:
    """Pontryagin solve for the optimal mean trajectory.

    The initial costate comes from the transition-block formula with the
    drift/cost integral taken by the trapezoidal rule over the backward
    family, then the state/costate pair is integrated forward; the mean
    control is v* = -B'lambda.
    """
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    if mean_tol is None:
        mean_tol = default_mean_tol(m1)
    tables = _half_tables(Abar, B, Q, abar, r)
    return _mean_from_tables(tables, B.values, m0, m1, grid, blocks, mean_tol)


def closed_loop_moments(
    problem: LinearSteeringProblem,
    Pi: TimeIndexedMatrix,
    mean: MeanSolution,
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal closed-loop moments from one joint (Pi, Sigma) RK4 pass.

    The Riccati variable advances with the covariance so no node
    interpolation of Pi enters; the terminal mean is mean.x_star[-1] (the
    closed-loop mean coincides with the Pontryagin trajectory).
    """
    grid = problem.grid
    n = problem.state_dim
    t = problem.half_tables()
    A_h, BBt_h, Q_h = t["A"], t["BBt"], t["Q"]
    eps = problem.eps
    nsq = n * n

    def rhs(k, y):
        A, BBt = A_h[k], BBt_h[k]
        P = y[:nsq].reshape(n, n)
        S = y[nsq:].reshape(n, n)
        dP = -(A.T @ P + P @ A - P @ BBt @ P + Q_h[k])
        Acl_S = (A - BBt @ P) @ S
        dS = Acl_S + Acl_S.T + eps * BBt
        return np.concatenate([dP.ravel(), dS.ravel()])

    y0 = np.concatenate([Pi.values[0].ravel(), problem.rho0.cov.ravel()])
    traj = integrate_ode_indexed(rhs, y0, grid)
    S_T = traj[-1, nsq:].reshape(n, n)
    return mean.x_star[-1].copy(), 0.5 * (S_T + S_T.T)


def solve_linear_steering(
    problem: LinearSteeringProblem,
    mean_tol: float | None = None,
    cov_tol: float = 1e-5,
    with_h: bool = False,
) -> tuple[AffinePolicy, RiccatiSolution, MeanSolution]:
    """Full solve: transition blocks, Riccati boundary value and sweep,
    Pontryagin mean, policy assembly, and a closed-loop feasibility check.

    The policy is u = K(t) X + d(t) with K = -B'Pi and d = B'Pi x* + v*.
    Raises SteeringResidualError if the closed loop misses the terminal
    covariance by more than cov_tol (relative Frobenius).
    """
    grid = problem.grid
    tables = problem.half_tables()
    blocks = _transition_from_tables(tables, grid)
    Pi0, H0 = riccati_boundary_init(
        problem.rho0.cov, problem.rho1.cov, problem.eps, blocks.Phi11, blocks.Phi12
    )
    Pi = _riccati_from_tables(Pi0, tables, grid, quad_sign=-1.0, const_sign=1.0)
    H = (
        _riccati_from_tables(H0, tables, grid, quad_sign=1.0, const_sign=-1.0)
        if with_h
        else None
    )
    if mean_tol is None:
        mean_tol = default_mean_tol(problem.rho1.mean)
    mean = _mean_from_tables(
        tables, problem.B.values, problem.rho0.mean, problem.rho1.mean, grid, blocks, mean_tol
    )

    Bv = problem.B.values
    BtPi = np.einsum("kji,kjl->kil", Bv, Pi.values)
    K = -BtPi
    d = np.einsum("kil,kl->ki", BtPi, mean.x_star) + mean.v_star
    policy = AffinePolicy(grid=grid, K=K, d=d)

    _, S_T = closed_loop_moments(problem, Pi, mean)
    cov_res = np.linalg.norm(S_T - problem.rho1.cov) / np.linalg.norm(problem.rho1.cov)
    if cov_res > cov_tol:
        raise SteeringResidualError(
            f"terminal covariance residual {cov_res:.3e} exceeds {cov_tol:.3e}"
        )

    return policy, RiccatiSolution(Pi=Pi, H=H), mean
