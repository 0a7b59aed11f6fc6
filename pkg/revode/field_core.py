"""
Vector fields f(t, y; θ) with exact evaluation and vector-Jacobian products.

Every solver and gradient engine in revode composes two primitives defined
here: `evaluate` and `vjp`. Analytic fields are used for convergence and
stability work; `MLPField` is the small tanh network trained in the
experiments. MLP adjoints are derived by hand per layer, there is no
general autodiff tape.
"""

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError

# |t| below this is treated as the white-dwarf origin r = 0
ORIGIN_TOL = 1e-12


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Params:
    """
    Flat float64 parameter vector plus a shape descriptor.

    The flat values are read-only; use `with_values` to derive new
    parameters (e.g. after an optimizer step).
    """

    __slots__ = ("_values", "_specs", "_offsets")

    def __init__(self, values, specs: Sequence[TensorSpec]):
        flat = np.array(values, dtype=np.float64).ravel()
        specs = tuple(specs)
        offsets = [0]
        for spec in specs:
            offsets.append(offsets[-1] + spec.size)
        if flat.size != offsets[-1]:
            raise ConfigurationError(
                f"params length {flat.size} does not match declared tensor sizes {offsets[-1]}"
            )
        flat.setflags(write=False)
        self._values = flat
        self._specs = specs
        self._offsets = tuple(offsets)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def specs(self) -> Tuple[TensorSpec, ...]:
        return self._specs

    @property
    def size(self) -> int:
        return self._values.size

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        names = ", ".join(f"{s.name}{list(s.shape)}" for s in self._specs)
        return f"Params({names})"

    def unflatten(self) -> Dict[str, np.ndarray]:
        """Return read-only views of the named tensors."""
        tensors = {}
        for spec, start, stop in zip(self._specs, self._offsets, self._offsets[1:]):
            tensors[spec.name] = self._values[start:stop].reshape(spec.shape)
        return tensors

    def tensor(self, name: str) -> np.ndarray:
        return self.unflatten()[name]

    @classmethod
    def flatten(cls, tensors: Mapping[str, np.ndarray]) -> "Params":
        """Build Params from named tensors, keeping mapping order."""
        specs = []
        chunks = []
        for name, value in tensors.items():
            arr = np.asarray(value, dtype=np.float64)
            specs.append(TensorSpec(name, tuple(arr.shape)))
            chunks.append(arr.ravel())
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, specs)

    @classmethod
    def empty(cls) -> "Params":
        return cls(np.zeros(0), ())

    def with_values(self, values) -> "Params":
        return Params(values, self._specs)

    def zeros(self) -> np.ndarray:
        """Writable zero vector shaped like the flat parameters."""
        return np.zeros(self.size)

    def descriptor(self) -> dict:
        return {
            "dtype": "float64",
            "byteorder": "little",
            "size": self.size,
            "tensors": [{"name": s.name, "shape": list(s.shape)} for s in self._specs],
        }

    def save(self, stem) -> Tuple[Path, Path]:
        """Write `<stem>.params.bin` (raw little-endian float64) and `<stem>.params.json`."""
        bin_path = Path(f"{stem}.params.bin")
        json_path = Path(f"{stem}.params.json")
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        bin_path.write_bytes(self._values.astype("<f8").tobytes())
        json_path.write_text(json.dumps(self.descriptor(), indent=2), encoding="utf-8")
        return bin_path, json_path

    @classmethod
    def load(cls, stem) -> "Params":
        descriptor = json.loads(Path(f"{stem}.params.json").read_text(encoding="utf-8"))
        raw = Path(f"{stem}.params.bin").read_bytes()
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        specs = [TensorSpec(t["name"], tuple(t["shape"])) for t in descriptor["tensors"]]
        return cls(values, specs)


class FieldKind(str, Enum):
    LINEAR = "analytic-linear"
    LINEAR_SYSTEM = "analytic-linear-system"
    WHITE_DWARF = "analytic-white-dwarf"
    LORENZ = "analytic-lorenz"
    MLP = "mlp"


class VectorField(ABC):
    """Immutable dynamics f(t, y; θ) of input dimension `dim`."""

    kind: FieldKind

    def __init__(self, params: Params, dim: int):
        if not np.all(np.isfinite(params.values)):
            raise DomainError(f"{self.kind.value} field: parameters must be finite")
        self.params = params
        self.dim = dim

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, params={self.params!r})"

    @abstractmethod
    def _evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        """f(t, y; θ) for validated inputs."""

    @abstractmethod
    def _vjp(self, t: float, y: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(v·∂f/∂y, v·∂f/∂θ) for validated inputs."""

    @abstractmethod
    def with_params(self, params: Params) -> "VectorField":
        """Same field kind and shape with new parameter values."""


def _check_input(field: VectorField, t: float, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (field.dim,):
        raise ConfigurationError(f"state has shape {y.shape}, field expects ({field.dim},)")
    if not (np.isfinite(t) and np.all(np.isfinite(y))):
        raise DomainError(f"non-finite input to {field.kind.value} field at t={t}")
    return y


def evaluate(field: VectorField, t: float, y: np.ndarray) -> np.ndarray:
    """
    Evaluate the dynamics.

    Raises:
        DomainError: If t or any component of y is non-finite
    """
    y = _check_input(field, t, y)
    return field._evaluate(float(t), y)


def vjp(field: VectorField, t: float, y: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pull a cotangent back through the field.

    Returns:
        tuple: (v·∂f/∂y with shape (dim,), v·∂f/∂θ with shape (params.size,))
    """
    y = _check_input(field, t, y)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (field.dim,):
        raise ConfigurationError(f"cotangent has shape {v.shape}, field expects ({field.dim},)")
    if not np.all(np.isfinite(v)):
        raise DomainError("non-finite cotangent")
    return field._vjp(float(t), y, v)


class LinearField(VectorField):
    """dy/dt = α·y, with α the single parameter."""

    kind = FieldKind.LINEAR

    def __init__(self, params: Params, dim: int = 1):
        super().__init__(params, dim)
        self.alpha = float(params.values[0])

    def _evaluate(self, t, y):
        return self.alpha * y

    def _vjp(self, t, y, v):
        return self.alpha * v, np.array([v @ y])

    def with_params(self, params):
        return LinearField(params, self.dim)


def linear_field(alpha: float, dim: int = 1) -> LinearField:
    return LinearField(Params([alpha], [TensorSpec("alpha", ())]), dim)


class LinearSystemField(VectorField):
    """dy/dt = A·y with A a d×d parameter matrix."""

    kind = FieldKind.LINEAR_SYSTEM

    def __init__(self, params: Params, dim: int):
        super().__init__(params, dim)
        self.matrix = params.tensor("matrix")

    def _evaluate(self, t, y):
        return self.matrix @ y

    def _vjp(self, t, y, v):
        return self.matrix.T @ v, np.outer(v, y).ravel()

    def with_params(self, params):
        return LinearSystemField(params, self.dim)


def linear_system_field(matrix) -> LinearSystemField:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"linear system needs a square matrix, got {matrix.shape}")
    return LinearSystemField(Params.flatten({"matrix": matrix}), matrix.shape[0])


class WhiteDwarfField(VectorField):
    """
    Chandrasekhar's white-dwarf equation as a first-order system in (φ, φ').

    u' = w,  w' = -(2/r)·w - max(u² - C, 0)^{3/2}

    At r = 0 the 2w/r term is replaced by its series limit, giving
    w' = -max(u² - C, 0)^{3/2} / 3.
    """

    kind = FieldKind.WHITE_DWARF

    def __init__(self, params: Params, dim: int = 2):
        if dim != 2:
            raise ConfigurationError("white-dwarf field is two-dimensional")
        super().__init__(params, dim)
        self.constant = float(params.values[0])

    def _evaluate(self, t, y):
        u, w = y
        s = u * u - self.constant
        source = s ** 1.5 if s > 0.0 else 0.0
        if abs(t) < ORIGIN_TOL:
            dw = -source / 3.0
        else:
            dw = -2.0 * w / t - source
        return np.array([w, dw])

    def _vjp(self, t, y, v):
        u, w = y
        vu, vw = v
        s = u * u - self.constant
        root = np.sqrt(s) if s > 0.0 else 0.0
        if abs(t) < ORIGIN_TOL:
            dw_du, dw_dw, dw_dc = -u * root, 0.0, 0.5 * root
        else:
            dw_du, dw_dw, dw_dc = -3.0 * u * root, -2.0 / t, 1.5 * root
        y_bar = np.array([vw * dw_du, vu + vw * dw_dw])
        return y_bar, np.array([vw * dw_dc])

    def with_params(self, params):
        return WhiteDwarfField(params, self.dim)


class LorenzField(VectorField):
    """Lorenz-63 system; chaotic for the classic (10, 28, 8/3) coefficients."""

    kind = FieldKind.LORENZ

    def __init__(self, params: Params, dim: int = 3):
        if dim != 3:
            raise ConfigurationError("Lorenz field is three-dimensional")
        super().__init__(params, dim)
        self.sigma, self.rho, self.beta = (float(x) for x in params.values)

    def _evaluate(self, t, y):
        x1, x2, x3 = y
        return np.array([
            self.sigma * (x2 - x1),
            x1 * (self.rho - x3) - x2,
            x1 * x2 - self.beta * x3,
        ])

    def _vjp(self, t, y, v):
        x1, x2, x3 = y
        v1, v2, v3 = v
        y_bar = np.array([
            -self.sigma * v1 + (self.rho - x3) * v2 + x2 * v3,
            self.sigma * v1 - v2 + x1 * v3,
            -x1 * v2 - self.beta * v3,
        ])
        theta_bar = np.array([v1 * (x2 - x1), v2 * x1, -v3 * x3])
        return y_bar, theta_bar

    def with_params(self, params):
        return LorenzField(params, self.dim)


def lorenz_field(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> LorenzField:
    specs = [TensorSpec("sigma", ()), TensorSpec("rho", ()), TensorSpec("beta", ())]
    return LorenzField(Params([sigma, rho, beta], specs))


class MLPField(VectorField):
    """
    Two-layer tanh network f(t, y) = W2·tanh(W1·[t; y] + b1) + b2.

    With `time_dependent=False` the input is y alone.
    """

    kind = FieldKind.MLP

    def __init__(self, params: Params, dim: int, time_dependent: bool = True):
        super().__init__(params, dim)
        self.time_dependent = time_dependent
        tensors = params.unflatten()
        try:
            self.w1 = tensors["layer1.weight"]
            self.b1 = tensors["layer1.bias"]
            self.w2 = tensors["layer2.weight"]
            self.b2 = tensors["layer2.bias"]
        except KeyError as e:
            raise ConfigurationError(f"MLP params missing tensor {e}") from e
        in_dim = dim + 1 if time_dependent else dim
        if self.w1.shape[1] != in_dim or self.w2.shape[0] != dim:
            raise ConfigurationError(
                f"MLP weights {self.w1.shape}/{self.w2.shape} do not fit dim={dim}"
            )
        self.hidden = self.w1.shape[0]

    def _inputs(self, t, y):
        if self.time_dependent:
            x = np.empty(self.dim + 1)
            x[0] = t
            x[1:] = y
            return x
        return y

    def _evaluate(self, t, y):
        x = self._inputs(t, y)
        return self.w2 @ np.tanh(self.w1 @ x + self.b1) + self.b2

    def _vjp(self, t, y, v):
        x = self._inputs(t, y)
        h = np.tanh(self.w1 @ x + self.b1)
        a_bar = (self.w2.T @ v) * (1.0 - h * h)
        x_bar = self.w1.T @ a_bar
        theta_bar = np.concatenate([
            np.outer(a_bar, x).ravel(),
            a_bar,
            np.outer(v, h).ravel(),
            v,
        ])
        y_bar = x_bar[1:] if self.time_dependent else x_bar
        return y_bar, theta_bar

    def with_params(self, params):
        return MLPField(params, self.dim, self.time_dependent)


def init_mlp_params(dim: int, hidden: int = 10, seed: int = 0, time_dependent: bool = True) -> Params:
    """
    Fan-in uniform initialization, U(-1/√fan_in, 1/√fan_in) per layer.

    Args:
        dim: State dimension d
        hidden: Hidden layer width
        seed: Seed for numpy's 64-bit PCG generator
        time_dependent: Whether t is appended to the network input

    Returns:
        Params: Tensors layer1.weight, layer1.bias, layer2.weight, layer2.bias
    """
    if dim < 1 or hidden < 1:
        raise ConfigurationError(f"MLP needs dim >= 1 and hidden >= 1, got {dim}, {hidden}")
    rng = np.random.default_rng(seed)
    fan_in = dim + 1 if time_dependent else dim
    bound1 = 1.0 / np.sqrt(fan_in)
    bound2 = 1.0 / np.sqrt(hidden)
    return Params.flatten({
        "layer1.weight": rng.uniform(-bound1, bound1, size=(hidden, fan_in)),
        "layer1.bias": rng.uniform(-bound1, bound1, size=hidden),
        "layer2.weight": rng.uniform(-bound2, bound2, size=(dim, hidden)),
        "layer2.bias": rng.uniform(-bound2, bound2, size=dim),
    })


def mlp_field(dim: int, hidden: int = 10, seed: int = 0, time_dependent: bool = True) -> MLPField:
    return MLPField(init_mlp_params(dim, hidden, seed, time_dependent), dim, time_dependent)


def zero_mlp_field(dim: int, hidden: int = 10, time_dependent: bool = True) -> MLPField:
    """MLP with every parameter zero, i.e. f ≡ 0."""
    template = init_mlp_params(dim, hidden, 0, time_dependent)
    return MLPField(template.with_values(template.zeros()), dim, time_dependent)
