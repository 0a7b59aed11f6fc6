"""Operation and memory counters shared by the gradient engines."""

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np


@dataclass
class Counters:
    """
    Deterministic work and memory counters for one solve + backprop.

    `stored_state_peak` is measured in checkpoint units: one stored primal
    state vector for plain solves and for the reversible engine (which
    holds y and z, i.e. 2), one (y, z) pair for checkpointed reversible
    solves. `state_vector_peak` counts every live d-dimensional vector,
    adjoints included.
    """

    stored_state_peak: int = 0
    state_vector_peak: int = 0
    step_evals_forward: int = 0
    step_evals_backward: int = 0
    vjp_evals: int = 0
    n_steps: int = 0
    rejected_steps: int = 0
    max_local_mismatch: float = 0.0

    def note_stored(self, checkpoints: int, vectors: int) -> None:
        self.stored_state_peak = max(self.stored_state_peak, checkpoints)
        self.state_vector_peak = max(self.state_vector_peak, vectors)

    @property
    def step_evals(self) -> int:
        return self.step_evals_forward + self.step_evals_backward

    def to_dict(self) -> dict:
        data = asdict(self)
        data["step_evals"] = self.step_evals
        return data


@dataclass
class MemoryLedger:
    """
    Named live allocations whose running totals feed the `Counters` peaks.

    Entries are held at step boundaries; stage vectors and the state being
    replaced within a step are not counted.
    """

    counters: Counters
    entries: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def checkpoints(self) -> int:
        return sum(c for c, _ in self.entries.values())

    @property
    def vectors(self) -> int:
        return sum(v for _, v in self.entries.values())

    def hold(self, key: str, checkpoints: int, vectors: int) -> None:
        if key in self.entries:
            raise KeyError(f"{key!r} is already held")
        self.entries[key] = (checkpoints, vectors)
        self.counters.note_stored(self.checkpoints, self.vectors)

    def release(self, key: str) -> None:
        del self.entries[key]

    def replace(self, key: str, checkpoints: int, vectors: int) -> None:
        self.release(key)
        self.hold(key, checkpoints, vectors)


@dataclass
class GradientResult:
    """Loss value and gradients returned by every backprop engine."""

    loss: float
    theta_bar: np.ndarray
    y0_bar: np.ndarray
    counters: Counters = field(default_factory=Counters)
    record: Optional[object] = None
    forward_ms: float = 0.0
    backward_ms: float = 0.0
