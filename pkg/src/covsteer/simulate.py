"""Closed-loop Euler-Maruyama Monte Carlo validation.

Paths are driven by per-path counter-based random streams (Philox keyed on
(seed, path_index)), so the ensemble is reproducible bit-for-bit regardless
of how paths are partitioned across workers. Work is chunked into fixed-size
blocks and block results are combined in block order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, SimulationError
from .linear_steering import AffinePolicy
from .models import GaussianMarginal, NonlinearModel
from .numerics import TimeGrid
from .prox_steering import MomentTrajectory

_BLOCK = 256  # fixed block size; must not depend on the worker count
_OVERFLOW_GUARD = 1e8


@dataclass
class EnsembleResult:
    """Summary statistics of a closed-loop Monte Carlo run."""

    grid: TimeGrid
    n_paths: int
    seed: int
    node_mean: np.ndarray
    node_cov: np.ndarray
    terminal_states: np.ndarray
    costs: np.ndarray
    cost_mean: float
    cost_stderr: float
    n_diverged: int
    containment_fraction: Optional[float] = None
    sample_paths: Optional[np.ndarray] = None

    @property
    def terminal_mean(self) -> np.ndarray:
        return self.terminal_states.mean(axis=0)

    @property
    def terminal_cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.terminal_states, rowvar=False, ddof=1))


@dataclass
class Verdict:
    """Outcome of comparing an ensemble's terminal marginal to a target."""

    mean_z_scores: np.ndarray
    cov_rel_error: float
    cov_threshold: float
    mean_passed: bool
    cov_passed: bool

    @property
    def passed(self) -> bool:
        return self.mean_passed and self.cov_passed


def _path_noise(seed: int, path_index: int, n: int, n_steps: int, p: int):
    """Initial-state and increment draws for one path from its own stream.

    Draw order per path: n values for the initial state, then row i holds the
    p increments of step i.
    """
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, path_index], dtype=np.uint64))
    )
    xi0 = rng.standard_normal(n)
    xi = rng.standard_normal((n_steps, p))
    return xi0, xi


def _state_cost_batch(
    model: NonlinearModel,
    X: np.ndarray,
    node_index: int,
    cost_reference: Optional[np.ndarray],
) -> np.ndarray:
    """State cost of a block of samples at one node.

    Vectorized for moving-reference tracking costs and for centered quadratic
    costs (constant Hessian, V(0) = 0); other costs fall back to a per-sample
    loop.
    """
    if model.tracking_weight is not None:
        if cost_reference is None:
            raise ConfigError("tracking cost requires a reference trajectory")
        d = X - cost_reference[node_index]
        return 0.5 * np.einsum("bi,ij,bj->b", d, model.tracking_weight, d)
    if model.hess_V_is_constant:
        n = X.shape[1]
        zero = np.zeros(n)
        if model.V(zero) == 0.0 and not np.any(model.grad_V(zero)):
            H = model.hess_V(zero)
            if not np.any(H):
                return np.zeros(X.shape[0])
            return 0.5 * np.einsum("bi,ij,bj->b", X, H, X)
    return np.array([model.V(x) for x in X])


def _simulate_block(
    block_index: int,
    path_range: tuple[int, int],
    model: NonlinearModel,
    policy: AffinePolicy,
    rho0: GaussianMarginal,
    eps: float,
    grid: TimeGrid,
    seed: int,
    cost_reference: Optional[np.ndarray],
    containment: Optional[tuple[np.ndarray, np.ndarray, tuple]],
    store_upto: int,
):
    lo, hi = path_range
    bs = hi - lo
    n = model.state_dim
    p = model.input_dim
    nodes = grid.nodes
    dt = grid.dt
    sqrt_noise = np.sqrt(eps * dt)

    xi0 = np.empty((bs, n))
    xi = np.empty((grid.n_steps, bs, p))
    for j in range(bs):
        a, b = _path_noise(seed, lo + j, n, grid.n_steps, p)
        xi0[j] = a
        xi[:, j, :] = b

    L = np.linalg.cholesky(rho0.cov)
    X = rho0.mean + xi0 @ L.T

    sum_x = np.zeros((grid.n_nodes, n))
    sum_xx = np.zeros((grid.n_nodes, n, n))
    costs = np.zeros(bs)
    alive = np.ones(bs, dtype=bool)
    inside = 0
    stored = None
    n_store = max(0, min(store_upto - lo, bs))
    if n_store > 0:
        stored = np.empty((n_store, grid.n_nodes, n))

    state_dep = model.state_dependent_input
    B_const = None if state_dep else np.stack([model.B(t) for t in nodes])

    def record(i, X):
        nonlocal inside
        sum_x[i] += X.sum(axis=0)
        sum_xx[i] += X.T @ X
        if stored is not None:
            stored[:, i, :] = X[:n_store]
        if containment is not None:
            z_ref, inv_blocks, coords = containment
            d = (X - z_ref[i])[:, coords]
            q = np.einsum("bi,ij,bj->b", d, inv_blocks[i], d)
            inside += int(np.count_nonzero(q <= 9.0))

    record(0, X)
    for i in range(grid.n_steps):
        t = nodes[i]
        u = X @ policy.K[i].T + policy.d[i]
        costs += (0.5 * np.einsum("bj,bj->b", u, u)
                  + _state_cost_batch(model, X, i, cost_reference)) * dt
        drift = model.f(t, X)
        if state_dep:
            G = model.g(t, X)
            push = np.einsum("bij,bj->bi", G, u)
            noise = np.einsum("bij,bj->bi", G, xi[i])
        else:
            Bi = B_const[i]
            push = u @ Bi.T
            noise = xi[i] @ Bi.T
        X_next = X + (drift + push) * dt + sqrt_noise * noise
        bad = ~np.isfinite(X_next).all(axis=1) | (
            np.max(np.abs(np.where(np.isfinite(X_next), X_next, np.inf)), axis=1)
            > _OVERFLOW_GUARD
        )
        newly_dead = bad & alive
        if np.any(newly_dead):
            X_next[newly_dead] = X[newly_dead]  # freeze at last finite state
            alive &= ~newly_dead
        X_next[~alive] = X[~alive]
        X = X_next
        record(i + 1, X)

    return {
        "block": block_index,
        "sum_x": sum_x,
        "sum_xx": sum_xx,
        "costs": costs,
        "terminal": X,
        "diverged": int(np.count_nonzero(~alive)),
        "inside": inside,
        "stored": stored,
        "store_lo": lo,
    }


def sample_paths(
    model: NonlinearModel,
    policy: AffinePolicy,
    rho0: GaussianMarginal,
    eps: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    cost_reference: Optional[np.ndarray] = None,
    reference_moments: Optional[MomentTrajectory] = None,
    containment_coords: Optional[tuple] = None,
    store_paths: int = 0,
    workers: int = 1,
) -> EnsembleResult:
    """Sample closed-loop Euler-Maruyama trajectories of the true system.

    The update is X+ = X + [f(t, X) + G(u dt-part)]dt + sqrt(eps*dt) G xi with
    u = K(t)X + d(t) and G the input channel (state-dependent for models with
    g). Initial states come from rho0 via Cholesky. The accumulated cost per
    path is the left-endpoint sum of (0.5||u||^2 + V(X)) dt.

    When reference_moments and containment_coords are given, the fraction of
    (path, node) pairs whose selected coordinates fall inside the 3-sigma
    ellipsoid of the reference covariance block is recorded.

    Results are independent of ``workers`` (fixed per-path streams, fixed
    block size, ordered reduction). Raises SimulationError when more than 1%
    of the paths blow past the overflow guard.
    """
    if n_paths < 2:
        raise ConfigError("n_paths must be at least 2")
    if policy.K.shape[0] != grid.n_nodes:
        raise ConfigError("policy grid does not match the simulation grid")
    n = model.state_dim

    containment = None
    if reference_moments is not None and containment_coords is not None:
        coords = tuple(int(c) for c in containment_coords)
        blocks = reference_moments.Sigma[:, coords, :][:, :, coords]
        inv_blocks = np.linalg.inv(blocks)
        containment = (reference_moments.z, inv_blocks, coords)

    ranges = [
        (b, (lo, min(lo + _BLOCK, n_paths)))
        for b, lo in enumerate(range(0, n_paths, _BLOCK))
    ]

    def run(args):
        b, rng_pair = args
        return _simulate_block(
            b, rng_pair, model, policy, rho0, eps, grid, seed,
            cost_reference, containment, store_paths,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, ranges))
    else:
        results = [run(r) for r in ranges]
    results.sort(key=lambda r: r["block"])

    sum_x = np.zeros((grid.n_nodes, n))
    sum_xx = np.zeros((grid.n_nodes, n, n))
    costs = np.empty(n_paths)
    terminal = np.empty((n_paths, n))
    n_diverged = 0
    inside = 0
    stored = np.empty((min(store_paths, n_paths), grid.n_nodes, n)) if store_paths else None
    for r, (b, (lo, hi)) in zip(results, ranges):
        sum_x += r["sum_x"]
        sum_xx += r["sum_xx"]
        costs[lo:hi] = r["costs"]
        terminal[lo:hi] = r["terminal"]
        n_diverged += r["diverged"]
        inside += r["inside"]
        if stored is not None and r["stored"] is not None:
            s = r["stored"]
            stored[r["store_lo"] : r["store_lo"] + s.shape[0]] = s

    if n_diverged > 0.01 * n_paths:
        raise SimulationError(
            f"{n_diverged} of {n_paths} paths diverged beyond the overflow guard"
        )

    node_mean = sum_x / n_paths
    outer = np.einsum("ki,kj->kij", node_mean, node_mean)
    node_cov = (sum_xx - n_paths * outer) / (n_paths - 1)
    node_cov = 0.5 * (node_cov + np.swapaxes(node_cov, 1, 2))

    cost_mean = float(costs.mean())
    cost_stderr = float(costs.std(ddof=1) / np.sqrt(n_paths))
    frac = inside / (n_paths * grid.n_nodes) if containment is not None else None

    return EnsembleResult(
        grid=grid,
        n_paths=n_paths,
        seed=seed,
        node_mean=node_mean,
        node_cov=node_cov,
        terminal_states=terminal,
        costs=costs,
        cost_mean=cost_mean,
        cost_stderr=cost_stderr,
        n_diverged=n_diverged,
        containment_fraction=frac,
        sample_paths=stored,
    )


def empirical_check(ensemble: EnsembleResult, target: GaussianMarginal) -> Verdict:
    """Compare the terminal empirical marginal against a target Gaussian.

    Each mean coordinate is tested at 3 standard errors; the covariance
    deviation is the relative Frobenius error with a pass threshold that
    combines the sampling error O(1/sqrt(n_paths)) and the discretization
    error O(dt).
    """
    n = target.dim
    N = ensemble.n_paths
    emp_mean = ensemble.terminal_mean
    emp_cov = ensemble.terminal_cov
    stderr = ensemble.terminal_states.std(axis=0, ddof=1) / np.sqrt(N)
    z = (emp_mean - target.mean) / np.where(stderr > 0, stderr, np.inf)
    cov_err = float(np.linalg.norm(emp_cov - target.cov) / np.linalg.norm(target.cov))
    threshold = 3.0 * np.sqrt(2.0 * n / N) + 5.0 * ensemble.grid.dt
    return Verdict(
        mean_z_scores=z,
        cov_rel_error=cov_err,
        cov_threshold=float(threshold),
        mean_passed=bool(np.all(np.abs(z) < 3.0)),
        cov_passed=cov_err < threshold,
    )
