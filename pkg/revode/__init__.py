"""Reversible Runge-Kutta solvers with exact, constant-memory backpropagation for Neural ODEs."""

from .errors import (
    CheckFailure,
    ConfigurationError,
    DataError,
    DivergenceError,
    DomainError,
    ParseError,
    ResourceError,
    ReversibilityBreakdownError,
    RevodeError,
    StiffnessError,
)
from .field_core import Params, VectorField, linear_field, mlp_field
from .instrumentation import Counters, GradientResult
from .reversible_engine import backward_step, forward_step, reversible_backprop, reversible_gradient, solve_forward
from .rk_solvers import make_tableau, step, step_vjp
from .step_control import AdaptiveSchedule, ControllerConfig, FixedSchedule

__version__ = "0.1.0"
