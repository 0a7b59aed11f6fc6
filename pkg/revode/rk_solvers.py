"""
Explicit Runge-Kutta step functions Ψ_h defined by Butcher tableaux.

A step returns the increment Ψ_h(t, y) (not y + Ψ) so the same function
serves plain solves, both halves of the reversible scheme and the
stability transfer function. Negative h runs the identical stage
recurrence with a signed step.
"""

from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DivergenceError, DomainError
from .field_core import VectorField, evaluate, vjp

TABLEAU_TOL = 1e-14
ORDER_CONDITION_TOL = 1e-12
MAX_CHECKED_ORDER = 4

_COEFFICIENTS = {
    "euler": dict(a=[[0.0]], b=[1.0], c=[0.0], order=1),
    "midpoint": dict(
        a=[[0.0, 0.0], [0.5, 0.0]],
        b=[0.0, 1.0],
        c=[0.0, 0.5],
        order=2,
    ),
    # minimal error-bound variant
    "ralston3": dict(
        a=[[0.0, 0.0, 0.0], [1 / 2, 0.0, 0.0], [0.0, 3 / 4, 0.0]],
        b=[2 / 9, 1 / 3, 4 / 9],
        c=[0.0, 1 / 2, 3 / 4],
        order=3,
    ),
    "rk4": dict(
        a=[
            [0.0, 0.0, 0.0, 0.0],
            [1 / 2, 0.0, 0.0, 0.0],
            [0.0, 1 / 2, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
        c=[0.0, 1 / 2, 1 / 2, 1.0],
        order=4,
    ),
    # Bogacki-Shampine 3(2), FSAL form; the last stage is only used by b_err
    "bosh3": dict(
        a=[
            [0.0, 0.0, 0.0, 0.0],
            [1 / 2, 0.0, 0.0, 0.0],
            [0.0, 3 / 4, 0.0, 0.0],
            [2 / 9, 1 / 3, 4 / 9, 0.0],
        ],
        b=[2 / 9, 1 / 3, 4 / 9, 0.0],
        c=[0.0, 1 / 2, 3 / 4, 1.0],
        order=3,
        b_err=[7 / 24, 1 / 4, 1 / 3, 1 / 8],
        embedded_order=2,
    ),
}

TABLEAU_NAMES = tuple(_COEFFICIENTS)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    b_err: Optional[np.ndarray] = None
    embedded_order: Optional[int] = None
    couplings: Tuple[Tuple[Tuple[int, float], ...], ...] = dataclass_field(init=False, repr=False)

    def __post_init__(self):
        a, b, c = _frozen(self.a), _frozen(self.b), _frozen(self.c)
        s = b.shape[0]
        if a.shape != (s, s) or c.shape != (s,):
            raise ConfigurationError(f"{self.name}: inconsistent tableau shapes")
        if np.any(np.triu(a) != 0.0):
            raise ConfigurationError(f"{self.name}: A must be strictly lower triangular")
        if np.max(np.abs(a.sum(axis=1) - c)) > TABLEAU_TOL:
            raise ConfigurationError(f"{self.name}: nodes c must equal the row sums of A")
        if abs(b.sum() - 1.0) > TABLEAU_TOL:
            raise ConfigurationError(f"{self.name}: weights must sum to 1")
        b_err = None
        if self.b_err is not None:
            b_err = _frozen(self.b_err)
            if b_err.shape != (s,) or self.embedded_order is None:
                raise ConfigurationError(f"{self.name}: embedded weights need shape ({s},) and an order")
        elif self.embedded_order is not None:
            raise ConfigurationError(f"{self.name}: embedded order given without embedded weights")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b_err", b_err)
        object.__setattr__(self, "couplings", tuple(
            tuple((j, float(a[i, j])) for j in range(i) if a[i, j] != 0.0) for i in range(s)
        ))

    @property
    def stages(self) -> int:
        return self.b.shape[0]

    @property
    def adaptive(self) -> bool:
        return self.b_err is not None


@lru_cache(maxsize=None)
def make_tableau(name: str) -> ButcherTableau:
    """
    Return one of the built-in tableaux (euler, midpoint, ralston3, rk4, bosh3).

    Raises:
        ConfigurationError: If the name is not recognized
    """
    key = name.lower()
    if key not in _COEFFICIENTS:
        raise ConfigurationError(f"unknown tableau {name!r}; choose from {', '.join(TABLEAU_NAMES)}")
    return ButcherTableau(name=key, **_COEFFICIENTS[key])


def tableau_json(tab: ButcherTableau) -> dict:
    data = {
        "name": tab.name,
        "stages": tab.stages,
        "order": tab.order,
        "a": tab.a.tolist(),
        "b": tab.b.tolist(),
        "c": tab.c.tolist(),
    }
    if tab.adaptive:
        data["b_err"] = tab.b_err.tolist()
        data["embedded_order"] = tab.embedded_order
    return data


@dataclass
class StepOutput:
    increment: np.ndarray
    error: Optional[np.ndarray] = None
    stages: Optional[List[np.ndarray]] = None
    stage_inputs: Optional[List[np.ndarray]] = None


def step(
    field: VectorField,
    tab: ButcherTableau,
    t: float,
    y: np.ndarray,
    h: float,
    keep_stages: bool = False,
) -> StepOutput:
    """
    Compute the increment Ψ_h(t, y) = h·Σ b_i k_i.

    Args:
        field: Dynamics to integrate
        tab: Explicit tableau
        t: Start time of the step
        y: Start state
        h: Signed step size
        keep_stages: Retain k_i and stage inputs (needed by `pullback`)

    Returns:
        StepOutput: Increment, embedded error estimate when the tableau has
        one, and optionally the stage values

    Raises:
        DivergenceError: If a stage input or value is non-finite
    """
    y = np.asarray(y, dtype=np.float64)
    ks: List[np.ndarray] = []
    inputs: List[np.ndarray] = []
    for i, row in enumerate(tab.couplings):
        y_i = y
        if row:
            acc = row[0][1] * ks[row[0][0]]
            for j, a_ij in row[1:]:
                acc = acc + a_ij * ks[j]
            y_i = y + h * acc
        try:
            k_i = evaluate(field, t + tab.c[i] * h, y_i)
        except DomainError as e:
            raise DivergenceError(f"non-finite input to stage {i}", stage=i) from e
        if not np.all(np.isfinite(k_i)):
            raise DivergenceError(f"non-finite value at stage {i}", stage=i)
        ks.append(k_i)
        if keep_stages:
            inputs.append(y_i)

    increment = h * _weighted(tab.b, ks)
    error = None
    if tab.b_err is not None:
        error = h * _weighted(tab.b - tab.b_err, ks)
    if keep_stages:
        return StepOutput(increment, error, ks, inputs)
    return StepOutput(increment, error)


def _weighted(weights: np.ndarray, ks: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(ks[0])
    for w, k in zip(weights, ks):
        if w != 0.0:
            total = total + w * k
    return total


Pullback = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def pullback(
    field: VectorField, tab: ButcherTableau, t: float, y: np.ndarray, h: float
) -> Tuple[StepOutput, Pullback]:
    """
    Run one stage sweep and return the step together with its VJP.

    The returned function maps a cotangent v to (v·∂Ψ/∂y, v·∂Ψ/∂θ) by a
    reverse sweep through the stage recurrence.
    """
    out = step(field, tab, t, y, h, keep_stages=True)
    n_params = field.params.size

    def apply(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite cotangent for step VJP")
        k_bar = [h * b_i * v for b_i in tab.b]
        y_bar = np.zeros_like(v)
        theta_bar = np.zeros(n_params)
        for i in range(tab.stages - 1, -1, -1):
            g_y, g_theta = vjp(field, t + tab.c[i] * h, out.stage_inputs[i], k_bar[i])
            y_bar += g_y
            theta_bar += g_theta
            for j, a_ij in tab.couplings[i]:
                k_bar[j] = k_bar[j] + (h * a_ij) * g_y
        return y_bar, theta_bar

    return out, apply


def step_vjp(
    field: VectorField,
    tab: ButcherTableau,
    t: float,
    y: np.ndarray,
    h: float,
    v: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """(v·∂Ψ_h/∂y, v·∂Ψ_h/∂θ), recomputing the stages."""
    _, apply = pullback(field, tab, t, y, h)
    return apply(v)


def transfer_function(tab: ButcherTableau, z):
    """
    R(z) = z·bᵀ(I - zA)⁻¹𝟙 by forward substitution.

    Accepts real or complex scalars and numpy arrays (evaluated elementwise).
    """
    z = np.asarray(z)
    g = []
    for row in tab.couplings:
        acc = 1.0
        for j, a_ij in row:
            acc = acc + a_ij * g[j]
        g.append(z * acc)
    r = 0.0 * z
    for b_i, g_i in zip(tab.b, g):
        if b_i != 0.0:
            r = r + b_i * g_i
    if r.ndim == 0:
        return r.item()
    return r


def check_order_conditions(tab: ButcherTableau, embedded: bool = False) -> int:
    """
    Largest k <= 4 whose rooted-tree order conditions all hold to 1e-12.

    Args:
        tab: Tableau to check
        embedded: Check the embedded weights b_err instead of b
    """
    if embedded:
        if tab.b_err is None:
            raise ConfigurationError(f"{tab.name} has no embedded weights")
        b = tab.b_err
    else:
        b = tab.b
    a = tab.a
    c = a.sum(axis=1)
    conditions = {
        1: [(b.sum(), 1.0)],
        2: [(b @ c, 1 / 2)],
        3: [(b @ c**2, 1 / 3), (b @ a @ c, 1 / 6)],
        4: [
            (b @ c**3, 1 / 4),
            (b @ (c * (a @ c)), 1 / 8),
            (b @ a @ c**2, 1 / 12),
            (b @ a @ a @ c, 1 / 24),
        ],
    }
    order = 0
    for k in range(1, MAX_CHECKED_ORDER + 1):
        if all(abs(value - target) <= ORDER_CONDITION_TOL for value, target in conditions[k]):
            order = k
        else:
            break
    return order


def local_lipschitz_estimate(
    field: VectorField,
    tab: ButcherTableau,
    t: float,
    h: float,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
) -> float:
    """Largest observed ‖Ψ_h(x) - Ψ_h(x')‖ / (|h|·‖x - x'‖) over the pairs."""
    worst = 0.0
    for x, x_prime in pairs:
        gap = np.linalg.norm(np.asarray(x) - np.asarray(x_prime))
        if gap == 0.0:
            continue
        diff = step(field, tab, t, x, h).increment - step(field, tab, t, x_prime, h).increment
        worst = max(worst, np.linalg.norm(diff) / (abs(h) * gap))
    return worst
