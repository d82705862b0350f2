from .heat import HeatParams, actuator_positions, build_heat2d
from .lotka import LotkaVolterraParams, build_lotka_volterra
from .model import (
    ConstraintReport,
    IntegrationError,
    SemilinearModel,
    StateConstraint,
    Trajectory,
    check_state_constraint,
    evaluate_cost,
    fixed_trajectory,
    integrate,
    march,
    write_trajectory,
)

__all__ = [
    "ConstraintReport", "HeatParams", "IntegrationError", "LotkaVolterraParams",
    "SemilinearModel", "StateConstraint", "Trajectory", "actuator_positions",
    "build_heat2d", "build_lotka_volterra", "check_state_constraint", "evaluate_cost",
    "fixed_trajectory", "integrate", "march", "write_trajectory",
]
