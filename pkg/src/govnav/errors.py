"""Exception hierarchy shared across the library."""


class GovnavError(Exception):
    """Base class for all library errors."""


class NumericalFailure(GovnavError):
    """An iterative numerical routine failed to converge or broke down."""


class NotHurwitz(GovnavError):
    """A matrix required to be Hurwitz has an eigenvalue with Re >= 0."""


class Infeasible(GovnavError):
    """A matrix-inequality problem has no strictly feasible point."""


class NoFeasiblePoint(GovnavError):
    """A scalar minimization found no finite function value on its bracket."""


class SingularState(GovnavError):
    """Feedback linearization requested at a state where the decoupling
    matrix is singular. The message names the condition that fired."""


class PoseInObstacle(GovnavError):
    """A sensor pose (robot position) lies inside the obstacle set."""


class PlanningFailed(GovnavError):
    """The grid planner found no path between start and goal."""


class Diverged(GovnavError):
    """Simulation state became non-finite."""


class ScenarioError(GovnavError):
    """A scenario file is invalid or fails its preconditions."""
