"""Exception hierarchy shared by every revode module.

Each class carries the process exit code the CLI maps it to: 1 for
numerical failures, 2 for usage and configuration problems.
"""

from typing import Any, Optional


class RevodeError(Exception):
    """Base class for all revode errors."""

    exit_code = 1


class ConfigurationError(RevodeError):
    """Invalid configuration, unknown names or inconsistent arguments."""

    exit_code = 2


class DomainError(RevodeError):
    """Non-finite input handed to a vector field."""


class DivergenceError(RevodeError):
    """A stage value or state became non-finite during a solve."""

    def __init__(
        self,
        message: str,
        stage: Optional[int] = None,
        step: Optional[int] = None,
        last_state: Any = None,
    ):
        super().__init__(message)
        self.stage = stage
        self.step = step
        self.last_state = last_state

    def at_step(self, step: int, last_state: Any = None) -> "DivergenceError":
        """Return a copy of this error annotated with the solver step index."""
        err = DivergenceError(
            f"step {step}: {self}", stage=self.stage, step=step, last_state=last_state
        )
        err.__cause__ = self
        return err


class StiffnessError(RevodeError):
    """The step-size controller proposed a step below h_min."""

    def __init__(self, message: str, t: float = float("nan"), h: float = float("nan")):
        super().__init__(message)
        self.t = t
        self.h = h


class ReversibilityBreakdownError(RevodeError):
    """Backward reconstruction produced non-finite or inconsistent states."""

    def __init__(self, message: str, step: int, mismatch: float = float("nan")):
        super().__init__(message)
        self.step = step
        self.mismatch = mismatch


class ResourceError(RevodeError):
    """A memory bound (tape size, checkpoint slots) would be exceeded."""


class DataError(RevodeError):
    """Input data is unusable (unsorted or duplicate times, bad ranges)."""

    exit_code = 2


class ParseError(DataError):
    """A CSV cell could not be parsed as float64."""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"{message} (row {row}, column {column!r})")
        self.row = row
        self.column = column


class CheckFailure(RevodeError):
    """A gradient or acceptance check exceeded its tolerance."""
