"""Invariant-ellipsoid output bounds and reference-governor navigation."""

from .errors import (
    Diverged,
    GovnavError,
    Infeasible,
    NoFeasiblePoint,
    NotHurwitz,
    NumericalFailure,
    PlanningFailed,
    PoseInObstacle,
    ScenarioError,
    SingularState,
)

__version__ = "0.1.0"
