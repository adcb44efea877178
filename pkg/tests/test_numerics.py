import numpy as np
import pytest

from covsteer.errors import (
    EvaluationError,
    IntegrationDivergedError,
    NumericalDomainError,
)
from covsteer.numerics import (
    TimeGrid,
    TimeIndexedMatrix,
    fd_gradient,
    integrate_ode,
    integrate_ode_indexed,
    pinv_sym,
    sqrtm_spd,
)


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


class TestTimeGrid:
    def test_nodes_uniform_and_endpoints(self):
        g = TimeGrid(0.0, 2.0, 4)
        assert np.allclose(g.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
        assert np.all(np.diff(g.nodes) > 0)

    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 1.0, 10)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 1)

    def test_half_index_exact_on_stage_times(self):
        g = TimeGrid(0.0, 1.0, 10)
        for i, t in enumerate(g.nodes):
            assert g.half_index(t) == 2 * i
        assert g.half_index(g.nodes[3] + 0.5 * g.dt) == 7


class TestTimeIndexedMatrix:
    def test_node_values_exact_and_midpoint_average(self):
        g = TimeGrid(0.0, 1.0, 2)
        vals = np.array([[[0.0]], [[2.0]], [[6.0]]])
        tim = TimeIndexedMatrix(g, vals)
        assert tim.at(0.5)[0, 0] == 2.0
        assert tim.at(0.25)[0, 0] == pytest.approx(1.0)
        half = tim.half_values()
        assert half.shape[0] == 5
        assert half[1, 0, 0] == 1.0 and half[3, 0, 0] == 4.0

    def test_rejects_wrong_node_count(self):
        g = TimeGrid(0.0, 1.0, 3)
        with pytest.raises(ValueError):
            TimeIndexedMatrix(g, np.zeros((3, 2, 2)))


class TestIntegrateOde:
    def test_exponential_growth(self):
        traj = integrate_ode(lambda t, y: y, np.array([1.0]), TimeGrid(0.0, 1.0, 100))
        assert abs(traj[-1, 0] - np.e) < 1e-9

    def test_zero_field_constant(self):
        c = np.array([3.0, -1.0])
        traj = integrate_ode(lambda t, y: np.zeros(2), c, TimeGrid(0.0, 1.0, 10))
        assert np.all(traj == c)

    def test_riccati_scalar_and_fourth_order(self):
        # dy/dt = -y^2, y0 = 1 has solution 1/(1+t)
        n = 100
        errs = []
        for steps in (n, 2 * n):
            traj = integrate_ode(lambda t, y: -(y**2), np.array([1.0]), TimeGrid(0.0, 1.0, steps))
            errs.append(abs(traj[-1, 0] - 0.5))
        assert errs[0] < 1e-9
        assert errs[0] / errs[1] > 12.0  # ~16x for order 4

    def test_convergence_order_on_linear_field(self):
        lam = -1.7
        exact = np.exp(lam)
        errs = []
        for steps in (20, 40, 80, 160):
            traj = integrate_ode(lambda t, y: lam * y, np.array([1.0]), TimeGrid(0.0, 1.0, steps))
            errs.append(abs(traj[-1, 0] - exact))
        orders = [np.log2(errs[i] / errs[i + 1]) for i in range(3)]
        assert min(orders) >= 3.9

    def test_divergence_names_first_bad_node(self):
        # dy/dt = y^2 from 2 blows up at t = 0.5
        with np.errstate(over="ignore"), pytest.raises(IntegrationDivergedError) as ei:
            integrate_ode(lambda t, y: y**2, np.array([2.0]), TimeGrid(0.0, 1.0, 50))
        assert 0.4 < ei.value.time <= 1.0

    def test_indexed_variant_matches(self):
        g = TimeGrid(0.0, 1.0, 32)
        rhs_t = lambda t, y: np.array([np.sin(t) - y[0]])
        half_t = g.t0 + 0.5 * g.dt * np.arange(2 * g.n_steps + 1)
        rhs_k = lambda k, y: np.array([np.sin(half_t[k]) - y[0]])
        a = integrate_ode(rhs_t, np.array([0.3]), g)
        b = integrate_ode_indexed(rhs_k, np.array([0.3]), g)
        assert np.allclose(a, b, atol=1e-14)


class TestSqrtmSpd:
    def test_identity_and_diagonal(self):
        assert np.allclose(sqrtm_spd(np.eye(3)), np.eye(3))
        assert np.allclose(sqrtm_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_square_property_on_random_spd(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            M = random_spd(rng, 5)
            S = sqrtm_spd(M)
            assert np.linalg.norm(S @ S - M) < 1e-10 * np.linalg.norm(M)

    def test_commutes_with_argument(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            M = random_spd(rng, 4)
            S = sqrtm_spd(M)
            assert np.linalg.norm(S @ M - M @ S) < 1e-9 * np.linalg.norm(M)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(NumericalDomainError):
            sqrtm_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite_reporting_eigenvalue(self):
        with pytest.raises(NumericalDomainError) as ei:
            sqrtm_spd(np.diag([1.0, -2.0]))
        assert "-2" in str(ei.value)


class TestPinvSym:
    def test_identity_and_rank_deficient_diagonal(self):
        assert np.allclose(pinv_sym(np.eye(3)), np.eye(3))
        assert np.allclose(pinv_sym(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))

    def test_inverse_property_full_rank(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            B = rng.standard_normal((4, 4))
            M = B @ B.T + 0.1 * np.eye(4)
            assert np.linalg.norm(pinv_sym(M) @ M - np.eye(4)) < 1e-9

    def test_moore_penrose_identities(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            B = rng.standard_normal((5, 2))  # rank-2 PSD
            M = B @ B.T
            P = pinv_sym(M)
            for lhs, rhs in (
                (M @ P @ M, M),
                (P @ M @ P, P),
                ((M @ P).T, M @ P),
                ((P @ M).T, P @ M),
            ):
                assert np.linalg.norm(lhs - rhs) < 1e-9 * max(1.0, np.linalg.norm(rhs))

    def test_rejects_negative_definite(self):
        with pytest.raises(NumericalDomainError):
            pinv_sym(np.diag([1.0, -1.0]))


class TestFdGradient:
    def test_linear_map_exact(self):
        c = np.array([1.5, -2.0, 0.25])
        g = fd_gradient(lambda x: float(c @ x), np.array([0.3, 0.7, -1.1]))
        assert np.allclose(g, c, atol=1e-9)

    def test_quadratic(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = np.array([0.4, -0.9])
        g = fd_gradient(lambda v: 0.5 * float(v @ Q @ v), x)
        assert np.allclose(g, Q @ x, atol=1e-8)

    def test_analytic_example(self):
        x = np.array([0.3, 2.0])
        g = fd_gradient(lambda v: np.sin(v[0]) * v[1], x, h=1e-4)
        expected = np.array([2.0 * np.cos(0.3), np.sin(0.3)])
        assert np.allclose(g, expected, atol=1e-6)

    def test_propagates_bad_evaluation(self):
        with pytest.raises(EvaluationError):
            fd_gradient(lambda v: float("nan"), np.zeros(2))
