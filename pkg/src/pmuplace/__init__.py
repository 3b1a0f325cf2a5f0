"""Tri-objective micro-PMU placement for distribution networks.

Minimises channel count, worst-case estimation uncertainty and sensitivity to
line-parameter tolerances with a constrained NSGA-II.
"""

from .estimation import UncertaintyParams
from .grid import GridModel, load_fixture, load_grid
from .moea import GAConfig, PlacementProblem, evolve
from .placement import Case, channel_config
from .sensitivity import SearchMode, ToleranceSpec

__version__ = "0.1.0"

__all__ = [
    "Case",
    "GAConfig",
    "GridModel",
    "PlacementProblem",
    "SearchMode",
    "ToleranceSpec",
    "UncertaintyParams",
    "channel_config",
    "evolve",
    "load_fixture",
    "load_grid",
]
