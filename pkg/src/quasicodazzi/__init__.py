"""Numerical engine for statistical manifolds, degenerate metrics and quasi-Codazzi structures."""

from .chart import Chart, FDConfig, Field, QuadratureRule, constant_field, expression_field, grad
from .errors import QCError
from .scene import load_scene, loads_scene

__version__ = "0.1.0"

__all__ = [
    "Chart",
    "FDConfig",
    "Field",
    "QCError",
    "QuadratureRule",
    "constant_field",
    "expression_field",
    "grad",
    "load_scene",
    "loads_scene",
]
