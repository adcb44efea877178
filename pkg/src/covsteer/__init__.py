"""Covariance steering for nonlinear control-affine stochastic systems.

Computes affine state-feedback laws that drive the mean and covariance of a
control-affine SDE from an initial Gaussian to a target Gaussian over a
finite horizon, through a proximal sequence of closed-form linear covariance
steering solves, and validates the result by Monte Carlo simulation.
"""

from .errors import (
    ConfigError,
    ControllabilityError,
    CovSteerError,
    EvaluationError,
    IntegrationDivergedError,
    NumericalDomainError,
    ShootingResidualError,
    SimulationError,
    SolverIterationError,
    StaleIterateError,
    SteeringResidualError,
)
from .linear_steering import (
    AffinePolicy,
    LinearSteeringProblem,
    MeanSolution,
    RiccatiSolution,
    TransitionData,
    integrate_riccati,
    integrate_riccati_h,
    riccati_boundary_init,
    solve_linear_steering,
    solve_mean,
    transition_blocks,
)
from .models import (
    GaussianMarginal,
    ManipulatorParams,
    NonlinearModel,
    double_integrator_drag,
    lti_test_model,
    manipulator_3link,
)
from .numerics import TimeGrid, TimeIndexedMatrix, fd_gradient, integrate_ode, pinv_sym, sqrtm_spd
from .prox_steering import (
    AffineDynamics,
    MomentTrajectory,
    SolveReport,
    SolverConfig,
    build_subproblem,
    linearize_prior,
    objective,
    propagate_moments,
    prox_update,
    retrieve_policy,
    solve,
    trace_gradient_terms,
)
from .simulate import EnsembleResult, Verdict, empirical_check, sample_paths

__version__ = "0.1.0"
