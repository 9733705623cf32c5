"""Numerical toolkit for filtering partially observed jump diffusions."""

from .grid import GridDensity, gaussian_density
from .model import CoefficientSet, Constants, JumpMeasure, validate_assumptions
from .families import make_family

__all__ = ["GridDensity", "gaussian_density", "CoefficientSet", "Constants", "JumpMeasure",
           "validate_assumptions", "make_family"]
