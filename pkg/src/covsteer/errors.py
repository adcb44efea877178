"""Exception types shared across the solver modules."""


class CovSteerError(Exception):
    """Base class for all solver errors."""


class IntegrationDivergedError(CovSteerError):
    """An ODE integration produced a non-finite value.

    Carries the index and time of the first bad node.
    """

    def __init__(self, node_index: int, time: float):
        self.node_index = node_index
        self.time = time
        super().__init__(
            f"integration diverged: non-finite state at node {node_index} (t={time:g})"
        )


class NumericalDomainError(CovSteerError):
    """A matrix function was applied outside its domain (e.g. non-SPD input)."""


class EvaluationError(CovSteerError):
    """A user-supplied callable returned a non-finite value."""


class ControllabilityError(CovSteerError):
    """The pair (A, B) cannot steer the state over the given horizon."""


class ShootingResidualError(CovSteerError):
    """The mean boundary-value solve missed the terminal mean."""


class SteeringResidualError(CovSteerError):
    """The closed loop missed the terminal moments beyond tolerance."""


class StaleIterateError(CovSteerError):
    """Policy retrieval was asked to run on dynamics that do not satisfy
    the boundary marginals."""


class ConfigError(CovSteerError):
    """Invalid configuration or dimension mismatch."""


class SimulationError(CovSteerError):
    """Monte Carlo sampling failed (e.g. too many diverged paths)."""


class SolverIterationError(CovSteerError):
    """A subproblem failed at some outer iteration.

    The last feasible iterate is attached so callers can still use it as a
    (suboptimal but valid) steering law.
    """

    def __init__(self, iteration: int, cause: Exception, last_iterate=None):
        self.iteration = iteration
        self.cause = cause
        self.last_iterate = last_iterate
        super().__init__(f"subproblem failed at iteration {iteration}: {cause}")
