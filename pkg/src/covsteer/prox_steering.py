"""Nonlinear covariance steering by proximal iteration on Gaussian Markov
path measures.

Each outer iteration propagates the moments of the current affine iterate,
linearizes the prior drift along its mean, assembles a linear covariance
steering subproblem (with first-order correction fields for the dependence of
the local approximations on the mean), solves it in closed form, and blends
the result back into the iterate. Every iterate after the first subproblem
solve is itself a feasible steering law.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, CovSteerError, NumericalDomainError, SolverIterationError, StaleIterateError
from .linear_steering import (
    AffinePolicy,
    LinearSteeringProblem,
    solve_linear_steering,
)
from .models import GaussianMarginal, NonlinearModel
from .numerics import (
    TimeGrid,
    TimeIndexedMatrix,
    fd_gradient,
    integrate_ode,
    integrate_ode_indexed,
)

_CBRT_EPS = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


@dataclass
class AffineDynamics:
    """A Gaussian Markov process dX = A(t)X dt + a(t) dt + sqrt(eps) input(t) dW,
    stored at grid nodes.

    For state-dependent input channels, ``input`` holds the channel matrix
    evaluated on the process's own mean trajectory.
    """

    grid: TimeGrid
    A: np.ndarray
    a: np.ndarray
    input: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.input = np.asarray(self.input, dtype=float)
        nn = self.grid.n_nodes
        n = self.A.shape[1]
        if self.A.shape != (nn, n, n) or self.a.shape != (nn, n):
            raise ConfigError(f"inconsistent dynamics shapes A{self.A.shape}, a{self.a.shape}")
        if self.input.ndim != 3 or self.input.shape[:2] != (nn, n):
            raise ConfigError(f"input matrix has shape {self.input.shape}")
        for name, arr in (("A", self.A), ("a", self.a), ("input", self.input)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"dynamics field {name} contains non-finite entries")

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input.shape[2]


@dataclass
class MomentTrajectory:
    grid: TimeGrid
    z: np.ndarray
    Sigma: np.ndarray


@dataclass
class SolverConfig:
    """Outer-loop settings; tolerances are forwarded to the linear solver."""

    grid: TimeGrid
    eta: float = 1.0
    max_iters: int = 100
    conv_tol: float = 1e-5
    init_mode: str = "zero-prior"
    fd_step: Optional[float] = None
    mean_tol: Optional[float] = None
    cov_tol: float = 1e-5

    def __post_init__(self):
        if self.eta <= 0.0:
            raise ConfigError("proximal stepsize eta must be positive")
        if self.conv_tol <= 0.0:
            raise ConfigError("conv_tol must be positive")
        if self.init_mode not in ("zero-prior", "linearized-prior"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    objective_trace: list
    stopping_trace: list
    mean_residual_trace: list
    cov_residual_trace: list
    wall_time: float
    objective_quadrature_trace: list = field(default_factory=list)

    def max_descent_violation(self) -> float:
        """Largest objective increase between consecutive feasible iterates.

        The initial guess (index 0) is excluded: it need not satisfy the
        terminal marginal, so the descent property starts at the first
        produced iterate.
        """
        tail = self.objective_trace[1:]
        if len(tail) < 2:
            return 0.0
        diffs = np.diff(np.asarray(tail))
        return float(max(0.0, np.max(diffs)))

    def descent_slack(self) -> float:
        """Allowed objective increase: 1e-8 plus the measured quadrature
        uncertainty of the objective evaluation."""
        scale = max(self.objective_quadrature_trace[1:], default=0.0)
        return 1e-8 + scale


# ---------------------------------------------------------------------------
# Moment propagation and linearization
# ---------------------------------------------------------------------------


def propagate_moments(
    dyn: AffineDynamics,
    eps: float,
    rho0: GaussianMarginal,
    grid: TimeGrid | None = None,
    input_fn: Optional[Callable[[float, np.ndarray], np.ndarray]] = None,
) -> MomentTrajectory:
    """Integrate the mean and covariance of an affine Gaussian Markov process.

    ``input_fn(t, z)``, when given, re-evaluates a state-dependent input
    channel at the running mean (the mean itself never depends on the input,
    so this is well defined); otherwise the stored node values of dyn.input
    are interpolated.
    """
    grid = grid or dyn.grid
    n = dyn.state_dim
    A_h = TimeIndexedMatrix(grid, dyn.A).half_values()
    a_h = TimeIndexedMatrix(grid, dyn.a).half_values()
    if input_fn is None:
        B_h = TimeIndexedMatrix(grid, dyn.input).half_values()
        BBt_h = B_h @ np.swapaxes(B_h, 1, 2)
    t0, half_dt = grid.t0, 0.5 * grid.dt

    def rhs(k, y):
        z = y[:n]
        S = y[n:].reshape(n, n)
        if input_fn is None:
            noise = BBt_h[k]
        else:
            G = input_fn(t0 + k * half_dt, z)
            noise = G @ G.T
        dz = A_h[k] @ z + a_h[k]
        AS = A_h[k] @ S
        dS = AS + AS.T + eps * noise
        return np.concatenate([dz, dS.ravel()])

    y0 = np.concatenate([rho0.mean, rho0.cov.ravel()])
    traj = integrate_ode_indexed(rhs, y0, grid)
    z = traj[:, :n]
    Sigma = traj[:, n:].reshape(-1, n, n)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
    min_eig = np.min(np.linalg.eigvalsh(Sigma))
    if min_eig < -1e-10:
        raise NumericalDomainError(
            f"covariance lost positive definiteness (min eigenvalue {min_eig:g})"
        )
    return MomentTrajectory(grid=grid, z=z, Sigma=Sigma)


def linearize_prior(
    model: NonlinearModel,
    z: np.ndarray,
    grid: TimeGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """First-order expansion of the drift along a mean trajectory.

    Returns node arrays (Ahat, ahat) with Ahat_i the drift Jacobian at
    (t_i, z_i) and ahat_i = f(t_i, z_i) - Ahat_i z_i.
    """
    nodes = grid.nodes
    nn = grid.n_nodes
    n = model.state_dim
    if model.time_invariant:
        Ahat = model.jac_f(nodes[0], z)
        ahat = model.f(nodes[0], z) - np.einsum("kij,kj->ki", Ahat, z)
        return Ahat, ahat
    Ahat = np.empty((nn, n, n))
    ahat = np.empty((nn, n))
    for i, t in enumerate(nodes):
        zi = z[i]
        Ai = model.jac_f(t, zi)
        Ahat[i] = Ai
        ahat[i] = model.f(t, zi) - Ai @ zi
    return Ahat, ahat


# ---------------------------------------------------------------------------
# Subproblem assembly
# ---------------------------------------------------------------------------


def _pinv_sym_stack(M: np.ndarray, rank_tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a stack of symmetric PSD matrices."""
    Ms = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam, V = np.linalg.eigh(Ms)
    lam_max = np.maximum(lam[..., -1:], 0.0)
    cut = rank_tol * lam_max
    keep = lam > cut
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    P = np.einsum("...ik,...k,...jk->...ij", V, inv, V)
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _state_cost_tables(
    model: NonlinearModel, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-node cost value, gradient, and Hessian along a mean trajectory.

    A moving-reference tracking cost is re-centered on z itself, so its value
    and gradient vanish at the nodes while the Hessian stays fixed.
    """
    nn, n = z.shape
    if model.tracking_weight is not None:
        W = model.tracking_weight
        return (
            np.zeros(nn),
            np.zeros((nn, n)),
            np.broadcast_to(W, (nn, n, n)).copy(),
        )
    vals = np.array([model.V(z[i]) for i in range(nn)])
    grads = np.stack([model.grad_V(z[i]) for i in range(nn)])
    if model.hess_V_is_constant:
        H0 = model.hess_V(z[0])
        hess = np.broadcast_to(H0, (nn, n, n)).copy()
    else:
        hess = np.stack([model.hess_V(z[i]) for i in range(nn)])
    return vals, grads, hess


def trace_gradient_terms(
    model: NonlinearModel,
    dyn: AffineDynamics,
    moments: MomentTrajectory,
    grid: TimeGrid | None = None,
    fd_step: Optional[float] = None,
) -> np.ndarray:
    """Correction field from the mean-dependence of the local approximations.

    Per node, with the covariance, iterate drift matrix, and input channel
    frozen, returns the gradient in z of

        Tr(hess_V(z) Sigma) + Tr((GG')^+ (J(z) - A) Sigma (J(z) - A)')

    evaluated at the iterate mean, where J is the drift Jacobian and G the
    input channel. Gradients are central finite differences of the scalar
    trace maps.
    """
    grid = grid or dyn.grid
    nodes = grid.nodes
    z = moments.z
    Sigma = moments.Sigma
    A = dyn.A
    nn, n = z.shape
    P = _pinv_sym_stack(dyn.input @ np.swapaxes(dyn.input, 1, 2))

    eye = np.eye(n)
    if fd_step is not None:
        hs = np.full(nn, float(fd_step))
    else:
        hs = _CBRT_EPS * np.maximum(1.0, np.max(np.abs(z), axis=1))
    # probes (nn, 2n, n): z_i + h e_j stacked over z_i - h e_j
    probes = np.concatenate(
        [z[:, None, :] + hs[:, None, None] * eye, z[:, None, :] - hs[:, None, None] * eye],
        axis=1,
    )
    if model.time_invariant:
        J = model.jac_f(nodes[0], probes)
    else:
        J = np.stack([model.jac_f(nodes[i], probes[i]) for i in range(nn)])
    D = J - A[:, None, :, :]
    vals = np.einsum("kab,kpbc,kcd,kpad->kp", P, D, Sigma, D)
    w = (vals[:, :n] - vals[:, n:]) / (2.0 * hs[:, None])

    if model.tracking_weight is None and not model.hess_V_is_constant:
        for i in range(nn):
            Si = Sigma[i]
            phi = lambda x: float(np.trace(model.hess_V(x) @ Si))
            w[i] += fd_gradient(phi, z[i], h=fd_step)
    return w


def build_subproblem(
    model: NonlinearModel,
    dyn_k: AffineDynamics,
    moments_k: MomentTrajectory,
    Ahat: np.ndarray,
    ahat: np.ndarray,
    eta: float,
    eps: float,
    rho0: GaussianMarginal,
    rho1: GaussianMarginal,
    grid: TimeGrid | None = None,
    fd_step: Optional[float] = None,
) -> LinearSteeringProblem:
    """Assemble the linear covariance steering problem of one proximal step.

    The subproblem drift blends the iterate with the prior linearization at
    ratio eta/(1+eta); the quadratic state weight collects the cost Hessian
    and a channel-weighted penalty on the drift mismatch, and the linear term
    collects the cost gradient, the re-centering of the quadratic expansion,
    the trace-gradient correction field, and the drift-offset cross term.
    """
    grid = grid or dyn_k.grid
    c1 = eta / (1.0 + eta)
    c2 = eta / (1.0 + eta) ** 2

    A, a, G = dyn_k.A, dyn_k.a, dyn_k.input
    Abar = (A + eta * Ahat) / (1.0 + eta)
    abar = (a + eta * ahat) / (1.0 + eta)

    P = _pinv_sym_stack(G @ np.swapaxes(G, 1, 2))
    dA = A - Ahat
    da = a - ahat
    _, grads, hess = _state_cost_tables(model, moments_k.z)
    w = trace_gradient_terms(model, dyn_k, moments_k, grid, fd_step=fd_step)

    dAt_P = np.einsum("kji,kjl->kil", dA, P)
    Qk = c1 * hess + c2 * (dAt_P @ dA)
    rk = (
        c1 * grads
        + 0.5 * c1 * (w - 2.0 * np.einsum("kij,kj->ki", hess, moments_k.z))
        + c2 * np.einsum("kil,kl->ki", dAt_P, da)
    )

    return LinearSteeringProblem(
        grid=grid,
        Abar=TimeIndexedMatrix(grid, Abar),
        abar=TimeIndexedMatrix(grid, abar),
        B=TimeIndexedMatrix(grid, G),
        Q=TimeIndexedMatrix(grid, Qk),
        r=TimeIndexedMatrix(grid, rk),
        eps=eps,
        rho0=rho0,
        rho1=rho1,
    )


def prox_update(
    dyn_k: AffineDynamics,
    Ahat: np.ndarray,
    ahat: np.ndarray,
    policy: AffinePolicy,
    eta: float,
    input_k: np.ndarray | None = None,
) -> AffineDynamics:
    """Blend the iterate toward the prior linearization and close the loop
    with the subproblem policy:

        A+ = (A + eta*Ahat)/(1+eta) + input K,
        a+ = (a + eta*ahat)/(1+eta) + input d.
    """
    G = dyn_k.input if input_k is None else np.asarray(input_k, dtype=float)
    A_next = (dyn_k.A + eta * Ahat) / (1.0 + eta) + G @ policy.K
    a_next = (dyn_k.a + eta * ahat) / (1.0 + eta) + np.einsum("kij,kj->ki", G, policy.d)
    return AffineDynamics(grid=dyn_k.grid, A=A_next, a=a_next, input=G)


def _objective_integrand(
    model: NonlinearModel,
    dyn: AffineDynamics,
    moments: MomentTrajectory,
    grid: TimeGrid,
) -> np.ndarray:
    Ahat, ahat = linearize_prior(model, moments.z, grid)
    dA = dyn.A - Ahat
    da = dyn.a - ahat
    P = _pinv_sym_stack(dyn.input @ np.swapaxes(dyn.input, 1, 2))

    u_mean = np.einsum("kij,kj->ki", dA, moments.z) + da
    energy = 0.5 * np.einsum("ki,kij,kj->k", u_mean, P, u_mean)
    energy += 0.5 * np.einsum("kab,kbc,kcd,kad->k", P, dA, moments.Sigma, dA)

    vals, _, hess = _state_cost_tables(model, moments.z)
    state = vals + 0.5 * np.einsum("kij,kji->k", hess, moments.Sigma)
    return energy + state


def _simpson(y: np.ndarray, dx: float) -> float:
    """Composite Simpson rule on a uniform grid; the last interval falls back
    to the trapezoid when the interval count is odd."""
    n = y.shape[0] - 1
    total = 0.0
    if n % 2 == 1:
        total += 0.5 * dx * (y[n - 1] + y[n])
        n -= 1
    if n >= 2:
        total += (dx / 3.0) * (y[0] + y[n] + 4.0 * np.sum(y[1:n:2]) + 2.0 * np.sum(y[2:n:2]))
    return float(total)


def objective(
    model: NonlinearModel,
    dyn: AffineDynamics,
    moments: MomentTrajectory,
    eps: float,
    grid: TimeGrid | None = None,
) -> float:
    """Expected control energy plus expected state cost of an iterate.

    The implied control is the drift deviation from the prior linearized
    along the iterate mean, measured through the input channel's
    pseudo-inverse metric; the state cost uses the second-order expansion at
    the mean, E V = V(z) + 0.5 Tr(hess_V(z) Sigma). Trapezoidal quadrature on
    the grid. Diagnostic only.
    """
    grid = grid or dyn.grid
    integrand = _objective_integrand(model, dyn, moments, grid)
    return float(np.trapezoid(integrand, dx=grid.dt))


def _objective_with_scale(model, dyn, moments, grid) -> tuple[float, float]:
    """Objective value and its quadrature uncertainty (trapezoid vs Simpson
    on the same nodes), used to size the descent-diagnostic slack."""
    integrand = _objective_integrand(model, dyn, moments, grid)
    J = float(np.trapezoid(integrand, dx=grid.dt))
    return J, abs(J - _simpson(integrand, grid.dt))


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def _input_nodes(model: NonlinearModel, z: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Input channel at the grid nodes, evaluated on z for state-dependent models."""
    nodes = grid.nodes
    if model.state_dependent_input:
        return np.stack([model.g(t, z[i]) for i, t in enumerate(nodes)])
    return np.stack([model.B(t) for t in nodes])


def initial_dynamics(
    model: NonlinearModel,
    rho0: GaussianMarginal,
    config: SolverConfig,
) -> AffineDynamics:
    """Build the starting iterate per config.init_mode.

    zero-prior: A = 0, a = 0 (pure diffusion around the initial mean).
    linearized-prior: roll out the uncontrolled drift from the initial mean
    and linearize along that trajectory.
    """
    grid = config.grid
    n = model.state_dim
    nn = grid.n_nodes
    if config.init_mode == "zero-prior":
        z0 = np.broadcast_to(rho0.mean, (nn, n)).copy()
        A0 = np.zeros((nn, n, n))
        a0 = np.zeros((nn, n))
    else:
        z0 = integrate_ode(lambda t, x: model.f(t, x), rho0.mean, grid)
        A0, a0 = linearize_prior(model, z0, grid)
    return AffineDynamics(grid=grid, A=A0, a=a0, input=_input_nodes(model, z0, grid))


def stopping_statistic(dyn_new: AffineDynamics, dyn_old: AffineDynamics) -> float:
    """Average relative node-wise change of (A, a), with +1-regularized
    denominators so quiescent nodes stay well defined."""
    dA = np.linalg.norm(dyn_new.A - dyn_old.A, axis=(1, 2))
    nA = np.linalg.norm(dyn_old.A, axis=(1, 2))
    da = np.linalg.norm(dyn_new.a - dyn_old.a, axis=1)
    na = np.linalg.norm(dyn_old.a, axis=1)
    return float(np.mean(dA / (1.0 + nA) + da / (1.0 + na)))


def _boundary_residuals(
    moments: MomentTrajectory, rho1: GaussianMarginal
) -> tuple[float, float]:
    mean_res = np.linalg.norm(moments.z[-1] - rho1.mean) / (
        1.0 + np.linalg.norm(rho1.mean)
    )
    cov_res = np.linalg.norm(moments.Sigma[-1] - rho1.cov) / np.linalg.norm(rho1.cov)
    return float(mean_res), float(cov_res)


def solve(
    model: NonlinearModel,
    rho0: GaussianMarginal,
    rho1: GaussianMarginal,
    config: SolverConfig,
    initial: AffineDynamics | None = None,
) -> tuple[AffineDynamics, SolveReport]:
    """Run the proximal iteration until the stopping statistic drops below
    conv_tol or max_iters is reached.

    Returns the final iterate (a feasible steering law even when not
    converged) and a report with the per-iteration traces. A subproblem
    failure raises SolverIterationError carrying the last feasible iterate.
    """
    if rho0.dim != model.state_dim or rho1.dim != model.state_dim:
        raise ConfigError("marginals do not match the model state dimension")
    grid = config.grid
    eps = model.eps
    input_fn = model.g if model.state_dependent_input else None

    dyn = initial if initial is not None else initial_dynamics(model, rho0, config)
    t_start = time.perf_counter()

    objective_trace: list[float] = []
    quadrature_trace: list[float] = []
    stopping_trace: list[float] = []
    mean_res_trace: list[float] = []
    cov_res_trace: list[float] = []
    converged = False
    iterations = 0

    for k in range(config.max_iters):
        moments = propagate_moments(dyn, eps, rho0, grid, input_fn=input_fn)
        if model.state_dependent_input:
            dyn = replace(dyn, input=_input_nodes(model, moments.z, grid))
        m_res, c_res = _boundary_residuals(moments, rho1)
        mean_res_trace.append(m_res)
        cov_res_trace.append(c_res)
        J, J_scale = _objective_with_scale(model, dyn, moments, grid)
        objective_trace.append(J)
        quadrature_trace.append(J_scale)

        Ahat, ahat = linearize_prior(model, moments.z, grid)
        problem = build_subproblem(
            model, dyn, moments, Ahat, ahat, config.eta, eps, rho0, rho1, grid,
            fd_step=config.fd_step,
        )
        try:
            policy, _, _ = solve_linear_steering(
                problem, mean_tol=config.mean_tol, cov_tol=config.cov_tol
            )
        except CovSteerError as e:
            raise SolverIterationError(k, e, last_iterate=dyn) from e

        dyn_next = prox_update(dyn, Ahat, ahat, policy, config.eta)
        stat = stopping_statistic(dyn_next, dyn)
        stopping_trace.append(stat)
        dyn = dyn_next
        iterations = k + 1
        if stat < config.conv_tol:
            converged = True
            break

    # record the final iterate's feasibility and objective
    moments = propagate_moments(dyn, eps, rho0, grid, input_fn=input_fn)
    if model.state_dependent_input:
        dyn = replace(dyn, input=_input_nodes(model, moments.z, grid))
    m_res, c_res = _boundary_residuals(moments, rho1)
    mean_res_trace.append(m_res)
    cov_res_trace.append(c_res)
    J, J_scale = _objective_with_scale(model, dyn, moments, grid)
    objective_trace.append(J)
    quadrature_trace.append(J_scale)

    report = SolveReport(
        iterations=iterations,
        converged=converged,
        objective_trace=objective_trace,
        stopping_trace=stopping_trace,
        mean_residual_trace=mean_res_trace,
        cov_residual_trace=cov_res_trace,
        wall_time=time.perf_counter() - t_start,
        objective_quadrature_trace=quadrature_trace,
    )
    return dyn, report


def retrieve_policy(
    model: NonlinearModel,
    dyn_star: AffineDynamics,
    rho0: GaussianMarginal,
    rho1: GaussianMarginal,
    config: SolverConfig,
    boundary_tol: float = 1e-3,
) -> AffinePolicy:
    """Recover the affine feedback law from converged dynamics.

    Propagates the converged moments, linearizes the prior along them, and
    solves one more linear steering problem whose state weight is the full
    cost Hessian and whose linear term carries the full-weight correction
    fields (no proximal blending). For state-dependent channels the input is
    frozen at the converged mean.
    """
    grid = config.grid
    eps = model.eps
    input_fn = model.g if model.state_dependent_input else None
    moments = propagate_moments(dyn_star, eps, rho0, grid, input_fn=input_fn)
    m_res, c_res = _boundary_residuals(moments, rho1)
    if m_res > boundary_tol or c_res > boundary_tol:
        raise StaleIterateError(
            f"dynamics do not satisfy the boundary marginals "
            f"(mean residual {m_res:.2e}, covariance residual {c_res:.2e})"
        )

    if model.state_dependent_input:
        dyn_star = replace(dyn_star, input=_input_nodes(model, moments.z, grid))

    Ahat, ahat = linearize_prior(model, moments.z, grid)
    _, grads, hess = _state_cost_tables(model, moments.z)
    w = trace_gradient_terms(model, dyn_star, moments, grid, fd_step=config.fd_step)
    Q_star = hess
    r_star = grads + 0.5 * (w - 2.0 * np.einsum("kij,kj->ki", hess, moments.z))

    problem = LinearSteeringProblem(
        grid=grid,
        Abar=TimeIndexedMatrix(grid, Ahat),
        abar=TimeIndexedMatrix(grid, ahat),
        B=TimeIndexedMatrix(grid, dyn_star.input),
        Q=TimeIndexedMatrix(grid, Q_star),
        r=TimeIndexedMatrix(grid, r_star),
        eps=eps,
        rho0=rho0,
        rho1=rho1,
    )
    policy, _, _ = solve_linear_steering(
        problem, mean_tol=config.mean_tol, cov_tol=config.cov_tol
    )
    return policy
