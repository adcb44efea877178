"""Dynamics/cost model interface and the bundled example systems.

Models are immutable after construction and their evaluation functions are
pure. Drift and Jacobian callables accept batched states: any input of shape
(..., n) yields an output with the same leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalDomainError
from .numerics import TimeGrid, integrate_ode

_CBRT_EPS = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


@dataclass(frozen=True)
class GaussianMarginal:
    """Mean and SPD covariance of a Gaussian state marginal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ConfigError(f"covariance shape {self.cov.shape} does not match mean dim {n}")
        if np.linalg.norm(self.cov - self.cov.T) > 1e-10 * max(1.0, np.linalg.norm(self.cov)):
            raise ConfigError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov)[0] <= 0.0:
            raise ConfigError("covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class NonlinearModel:
    """A control-affine stochastic system dX = f dt + input (u dt + sqrt(eps) dW)
    with a state cost.

    Exactly one of ``B`` (time-indexed input matrix) or ``g`` (state-dependent
    input matrix) is set. ``jac_f(t, x)`` is the matrix with entry (i, j) =
    d f_i / d x_j, i.e. the matrix multiplying x in the linearization of f.

    If ``tracking_weight`` is set, the state cost is the moving-reference
    quadratic 0.5 (x - z_ref)' W (x - z_ref); solvers re-center z_ref on the
    current mean trajectory each outer iteration. The plain V/grad_V/hess_V
    callables then describe the cost with z_ref = 0.

    ``time_invariant`` marks drifts that ignore their time argument, letting
    solvers batch f/jac_f evaluations across grid nodes.
    """

    state_dim: int
    input_dim: int
    f: Callable[[float, np.ndarray], np.ndarray]
    jac_f: Callable[[float, np.ndarray], np.ndarray]
    V: Callable[[np.ndarray], float]
    grad_V: Callable[[np.ndarray], np.ndarray]
    hess_V: Callable[[np.ndarray], np.ndarray]
    eps: float
    B: Optional[Callable[[float], np.ndarray]] = None
    g: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    tracking_weight: Optional[np.ndarray] = None
    hess_V_is_constant: bool = False
    time_invariant: bool = False
    name: str = "model"

    def __post_init__(self):
        if (self.B is None) == (self.g is None):
            raise ConfigError("exactly one of B(t) or g(t, x) must be provided")
        if self.eps <= 0.0:
            raise ConfigError("noise intensity eps must be positive")

    @property
    def state_dependent_input(self) -> bool:
        return self.g is not None

    def input_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Input matrix at (t, x): B(t) for fixed-channel models, g(t, x) otherwise."""
        if self.g is not None:
            return self.g(t, x)
        return self.B(t)


def fd_jacobian(
    f: Callable[[float, np.ndarray], np.ndarray],
    t: float,
    x: np.ndarray,
    h: float | None = None,
) -> np.ndarray:
    """Central-difference Jacobian of a (batched) drift at states x of shape (..., n).

    Returns (..., n, n) with entry (i, j) = d f_i / d x_j. The step is scaled
    per sample as eps^(1/3) * max(1, ||x||_inf).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if h is None:
        hs = _CBRT_EPS * np.maximum(1.0, np.max(np.abs(x), axis=-1, keepdims=True))
    else:
        hs = np.full(x.shape[:-1] + (1,), float(h))
    eye = np.eye(n)
    # probe tensor (..., 2n, n): +h e_j then -h e_j
    plus = x[..., None, :] + hs[..., None] * eye
    minus = x[..., None, :] - hs[..., None] * eye
    fp = f(t, plus)
    fm = f(t, minus)
    jac = (fp - fm) / (2.0 * hs[..., None])
    # jac[..., j, i] currently holds d f_i / d x_j; swap to (i, j)
    return np.swapaxes(jac, -1, -2)


# ---------------------------------------------------------------------------
# Double integrator with drag
# ---------------------------------------------------------------------------


def double_integrator_drag(
    c_d: float,
    eps: float,
    drag_form: str = "quadratic",
    tracking_weight: float = 0.2,
) -> NonlinearModel:
    """Planar double integrator with a drag force on the velocity.

    State is (position in R^2, velocity in R^2). The drag decelerates the
    velocity channel: ``quadratic`` uses -c_d*||v||*v (Jacobian defined as 0
    at v = 0), ``linear`` uses -c_d*v. The input and noise act on the
    velocity channel through B = [0; I].

    The default cost is the moving-reference quadratic with Hessian
    tracking_weight * I (solvers re-center it on the current mean).
    """
    if c_d < 0.0:
        raise ConfigError("drag coefficient must be nonnegative")
    if drag_form not in ("quadratic", "linear"):
        raise ConfigError(f"unknown drag form {drag_form!r}")

    B_mat = np.zeros((4, 2))
    B_mat[2:, :] = np.eye(2)
    W = tracking_weight * np.eye(4)

    def f(t, x):
        x = np.asarray(x, dtype=float)
        v = x[..., 2:]
        out = np.empty_like(x)
        out[..., :2] = v
        if drag_form == "quadratic":
            speed = np.linalg.norm(v, axis=-1, keepdims=True)
            out[..., 2:] = -c_d * speed * v
        else:
            out[..., 2:] = -c_d * v
        return out

    def jac_f(t, x):
        x = np.asarray(x, dtype=float)
        v = x[..., 2:]
        J = np.zeros(x.shape[:-1] + (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        if drag_form == "quadratic":
            speed = np.linalg.norm(v, axis=-1)
            safe = np.where(speed > 0.0, speed, 1.0)
            outer = v[..., :, None] * v[..., None, :] / safe[..., None, None]
            block = speed[..., None, None] * np.eye(2) + outer
            block = np.where(speed[..., None, None] > 0.0, block, 0.0)
            J[..., 2:, 2:] = -c_d * block
        else:
            J[..., 2, 2] = -c_d
            J[..., 3, 3] = -c_d
        return J

    return NonlinearModel(
        state_dim=4,
        input_dim=2,
        f=f,
        jac_f=jac_f,
        V=lambda x: 0.5 * float(x @ (W @ x)),
        grad_V=lambda x: W @ x,
        hess_V=lambda x: W,
        eps=eps,
        B=lambda t: B_mat,
        tracking_weight=W,
        hess_V_is_constant=True,
        time_invariant=True,
        name="double_integrator_drag",
    )


# ---------------------------------------------------------------------------
# Planar 3-link manipulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManipulatorParams:
    """Physical parameters of the planar 3-link arm.

    com[i] is the distance of link i's center of mass from its joint; the
    defaults model uniform rods (com = length/2, inertia = m*l^2/12 about
    the com). Set gravity = 0 for a floating arm.
    """

    masses: tuple = (1.0, 1.0, 1.0)
    lengths: tuple = (1.0, 1.0, 1.0)
    com: tuple | None = None
    inertias: tuple | None = None
    gravity: float = 9.81

    def resolved(self):
        m = np.asarray(self.masses, dtype=float)
        l = np.asarray(self.lengths, dtype=float)
        r = np.asarray(self.com, dtype=float) if self.com is not None else 0.5 * l
        if self.inertias is not None:
            I = np.asarray(self.inertias, dtype=float)
        else:
            I = m * l**2 / 12.0
        if np.any(m <= 0) or np.any(l <= 0) or np.any(r < 0) or np.any(I < 0):
            raise ConfigError("manipulator parameters must be positive")
        return m, l, r, I


class _ArmKinematics:
    """Center-of-mass Jacobians and their time derivatives for the 3R arm.

    All methods broadcast over leading batch dimensions of q / qd.
    """

    def __init__(self, params: ManipulatorParams):
        self.m, self.l, self.r, self.I = params.resolved()
        self.g0 = float(params.gravity)
        # omega_sel[i, k] = 1 if joint k drives the angle of link i
        self.omega_sel = np.tril(np.ones((3, 3)))
        # inertia part of the mass matrix is configuration-independent
        self.M_rot = sum(
            self.I[i] * np.outer(self.omega_sel[i], self.omega_sel[i]) for i in range(3)
        )

    def _jacobians(self, q):
        """J[..., i, :, :] (2x3) of com i; also returns cumulative angles."""
        theta = np.cumsum(q, axis=-1)
        ct, st = np.cos(theta), np.sin(theta)
        batch = q.shape[:-1]
        J = np.zeros(batch + (3, 2, 3))
        for i in range(3):
            for k in range(i + 1):
                # joints k..i-1 swing full links, joint..i swings the com offset
                for j in range(k, i):
                    J[..., i, 0, k] += -self.l[j] * st[..., j]
                    J[..., i, 1, k] += self.l[j] * ct[..., j]
                J[..., i, 0, k] += -self.r[i] * st[..., i]
                J[..., i, 1, k] += self.r[i] * ct[..., i]
        return J, ct, st

    def _jacobian_dots(self, q, qd):
        """dJ/dt for each com; d/dt of (-sin, cos) columns is -(cos, sin)*theta_dot."""
        theta = np.cumsum(q, axis=-1)
        theta_d = np.cumsum(qd, axis=-1)
        ct, st = np.cos(theta), np.sin(theta)
        batch = q.shape[:-1]
        Jd = np.zeros(batch + (3, 2, 3))
        for i in range(3):
            for k in range(i + 1):
                for j in range(k, i):
                    Jd[..., i, 0, k] += -self.l[j] * ct[..., j] * theta_d[..., j]
                    Jd[..., i, 1, k] += -self.l[j] * st[..., j] * theta_d[..., j]
                Jd[..., i, 0, k] += -self.r[i] * ct[..., i] * theta_d[..., i]
                Jd[..., i, 1, k] += -self.r[i] * st[..., i] * theta_d[..., i]
        return Jd

    def mass_matrix(self, q):
        J, _, _ = self._jacobians(q)
        M = np.zeros(q.shape[:-1] + (3, 3))
        for i in range(3):
            Ji = J[..., i, :, :]
            M += self.m[i] * np.swapaxes(Ji, -1, -2) @ Ji
        return M + self.M_rot

    def coriolis_vector(self, q, qd):
        J, _, _ = self._jacobians(q)
        Jd = self._jacobian_dots(q, qd)
        c = np.zeros_like(q)
        for i in range(3):
            Ji = J[..., i, :, :]
            Jdi = Jd[..., i, :, :]
            v = (Jdi @ qd[..., None])[..., 0]
            c += self.m[i] * (np.swapaxes(Ji, -1, -2) @ v[..., None])[..., 0]
        return c

    def gravity_vector(self, q):
        J, _, _ = self._jacobians(q)
        g = np.zeros_like(q)
        for i in range(3):
            g += self.m[i] * self.g0 * J[..., i, 1, :]
        return g

    def potential_energy(self, q):
        theta = np.cumsum(q, axis=-1)
        st = np.sin(theta)
        y = np.zeros(q.shape[:-1])
        U = np.zeros(q.shape[:-1])
        for i in range(3):
            y_ci = y + self.r[i] * st[..., i]
            U += self.m[i] * self.g0 * y_ci
            y = y + self.l[i] * st[..., i]
        return U

    def kinetic_energy(self, q, qd):
        M = self.mass_matrix(q)
        return 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)


def manipulator_3link(
    params: ManipulatorParams | None = None,
    eps: float = 0.1,
) -> NonlinearModel:
    """Planar 3-link manipulator with torque input and actuation noise.

    State X = (q, qd) in R^6; drift [qd; M(q)^{-1}(-c(q,qd) - grav(q))] and
    state-dependent input matrix g(t, X) = [0; M(q)^{-1}]. The drift Jacobian
    is computed by central finite differences of the drift. No state cost.
    """
    params = params or ManipulatorParams()
    kin = _ArmKinematics(params)

    def f(t, x):
        x = np.asarray(x, dtype=float)
        q, qd = x[..., :3], x[..., 3:]
        M = kin.mass_matrix(q)
        rhs = -(kin.coriolis_vector(q, qd) + kin.gravity_vector(q))
        try:
            qdd = np.linalg.solve(M, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            raise NumericalDomainError(f"singular mass matrix: {e}") from e
        out = np.empty_like(x)
        out[..., :3] = qd
        out[..., 3:] = qdd
        return out

    def jac_f(t, x):
        return fd_jacobian(f, t, x)

    def g(t, x):
        x = np.asarray(x, dtype=float)
        q = x[..., :3]
        M = kin.mass_matrix(q)
        try:
            Minv = np.linalg.inv(M)
        except np.linalg.LinAlgError as e:
            raise NumericalDomainError(f"singular mass matrix: {e}") from e
        G = np.zeros(x.shape[:-1] + (6, 3))
        G[..., 3:, :] = Minv
        return G

    zero = lambda x: 0.0
    model = NonlinearModel(
        state_dim=6,
        input_dim=3,
        f=f,
        jac_f=jac_f,
        V=zero,
        grad_V=lambda x: np.zeros(6),
        hess_V=lambda x: np.zeros((6, 6)),
        eps=eps,
        g=g,
        hess_V_is_constant=True,
        time_invariant=True,
        name="manipulator_3link",
    )
    # expose the kinematics for energy-based tests
    object.__setattr__(model, "_kinematics", kin)
    return model


def manipulator_energy(model: NonlinearModel, x: np.ndarray) -> float:
    """Total mechanical energy of a manipulator state (for conservation checks)."""
    kin = getattr(model, "_kinematics", None)
    if kin is None:
        raise ConfigError("model does not carry manipulator kinematics")
    x = np.asarray(x, dtype=float)
    q, qd = x[..., :3], x[..., 3:]
    return kin.kinetic_energy(q, qd) + kin.potential_energy(q)


# ---------------------------------------------------------------------------
# Linear test model
# ---------------------------------------------------------------------------


def lti_test_model(A: np.ndarray, B: np.ndarray, Q: np.ndarray, eps: float) -> NonlinearModel:
    """Linear drift f(t,x) = A x with quadratic state cost 0.5 x'Qx.

    Rejects uncontrollable (A, B) pairs via a controllability-Gramian rank
    check over a unit horizon.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or B.ndim != 2 or B.shape[0] != n:
        raise ConfigError(f"inconsistent shapes A{A.shape}, B{B.shape}")
    if Q.shape != (n, n) or np.linalg.norm(Q - Q.T) > 1e-10 * max(1.0, np.linalg.norm(Q)):
        raise ConfigError("Q must be symmetric n x n")

    BBt = B @ B.T

    def gram_rhs(t, W):
        return A @ W + W @ A.T + BBt

    gram = integrate_ode(gram_rhs, np.zeros((n, n)), TimeGrid(0.0, 1.0, 100))[-1]
    lam = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    if lam[0] <= 1e-10 * max(lam[-1], 1e-300):
        raise ConfigError(
            f"(A, B) fails the controllability Gramian test (eigenvalues {lam})"
        )

    Qs = 0.5 * (Q + Q.T)

    def f(t, x):
        x = np.asarray(x, dtype=float)
        return x @ A.T

    def jac_f(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (n, n)).copy()

    return NonlinearModel(
        state_dim=n,
        input_dim=B.shape[1],
        f=f,
        jac_f=jac_f,
        V=lambda x: 0.5 * float(x @ (Qs @ x)),
        grad_V=lambda x: Qs @ x,
        hess_V=lambda x: Qs,
        eps=eps,
        B=lambda t, _B=B: _B,
        hess_V_is_constant=True,
        time_invariant=True,
        name="lti",
    )
