"""Relax, round and refine: mixed-integer optimal control of switched evolution equations."""

__version__ = "0.1.0"

from .combinatorial import MinMaxSolution, SwitchBudget, brute_force_minmax, solve_minmax
from .rounding import (
    BinaryControl,
    RelaxedControl,
    TimeGrid,
    accumulated_deviation,
    refine_bisect,
    sur_round,
)

__all__ = [
    "BinaryControl", "MinMaxSolution", "RelaxedControl", "SwitchBudget", "TimeGrid",
    "__version__", "accumulated_deviation", "brute_force_minmax", "refine_bisect",
    "solve_minmax", "sur_round",
]
