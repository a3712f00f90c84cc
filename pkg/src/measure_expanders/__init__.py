"""Expanding Ricci solitons on surfaces from measure-expander data."""

from .errors import ConvergenceError, InputError, ShootingError, StateError
from .expander import FamilyTag, ProductExpander, box_mass, expanding_check, make_expander
from .fibre_measure import Fibre, FibreIsometry, FibreMeasure, nu_match
from .flow import BoundaryCondition, FlowConfig, run_flow
from .geometry import ConformalField, CylGrid
from .soliton_ode import shoot

__all__ = [
    "BoundaryCondition", "ConformalField", "ConvergenceError", "CylGrid", "FamilyTag",
    "Fibre", "FibreIsometry", "FibreMeasure", "FlowConfig", "InputError", "ProductExpander",
    "ShootingError", "StateError", "box_mass", "expanding_check", "make_expander",
    "nu_match", "run_flow", "shoot",
]
__version__ = "0.1.0"
