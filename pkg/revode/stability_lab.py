"""
Linear stability of the reversible scheme on dy/dt = αy, α < 0.

On the test problem one step maps (y_n, z_n) to T·(y_n, z_n) with a 2x2
amplification matrix whose trace is Γ and whose determinant is λ, so the
scheme is stable iff |Γ| < 1 + λ.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .field_core import linear_field
from .reversible_engine import Coupling, ReversibleState, forward_step
from .rk_solvers import ButcherTableau, transfer_function

logger = logging.getLogger(__name__)

BOUNDARY_BAND = 1e-9
DECAY_THRESHOLD = 1e-8
BLOWUP_THRESHOLD = 1e8

DECAYS = "decays"
BLOWS_UP = "blows_up"
INCONCLUSIVE = "inconclusive"

LEGACY_SCHEMES = ("reversible_heun", "asynchronous_leapfrog")


@dataclass(frozen=True)
class StabilityQuery:
    tab: ButcherTableau
    h_alpha: float
    lam: float

    def __post_init__(self):
        Coupling(self.lam)
        if not np.isfinite(self.h_alpha):
            raise ConfigurationError("h_alpha must be finite")


@dataclass(frozen=True)
class StabilityVerdict:
    gamma: float
    criterion: bool
    eigenvalues: np.ndarray
    rho: float
    marginal: bool
    empirical: Optional[str] = None

    @property
    def on_boundary(self) -> bool:
        return abs(self.rho - 1.0) <= BOUNDARY_BAND

    @property
    def consistent(self) -> bool:
        """Γ criterion and spectral radius agree (always true on the boundary band)."""
        return self.on_boundary or self.criterion == (self.rho < 1.0)


def gamma(tab: ButcherTableau, h_alpha, lam):
    """Γ = 1 + λ - (1 - λ)·R(-hα) - R(-hα)·R(hα); vectorizes over hα and λ."""
    r_plus = transfer_function(tab, h_alpha)
    r_minus = transfer_function(tab, -np.asarray(h_alpha))
    return 1.0 + lam - (1.0 - lam) * r_minus - r_minus * r_plus


def amplification_matrix(tab: ButcherTableau, h_alpha: float, lam: float) -> np.ndarray:
    """
    One-step map of the reversible scheme on the scalar test problem.

    T = [[λ, 1 - λ + R(hα)], [-λR(-hα), 1 - (1 - λ)R(-hα) - R(-hα)R(hα)]]
    """
    r_plus = transfer_function(tab, h_alpha)
    r_minus = transfer_function(tab, -h_alpha)
    return np.array(
        [
            [lam, 1.0 - lam + r_plus],
            [-lam * r_minus, 1.0 - (1.0 - lam) * r_minus - r_minus * r_plus],
        ]
    )


def is_stable(query: StabilityQuery, empirical_steps: int = 0) -> StabilityVerdict:
    """
    Evaluate the Γ criterion and the eigenvalues of T for one query.

    Args:
        query: Tableau, hα and λ
        empirical_steps: If positive, also simulate that many steps

    Returns:
        StabilityVerdict: Both checks; `marginal` is set at λ = 1 and on
        the |ρ - 1| <= 1e-9 band
    """
    g = float(gamma(query.tab, query.h_alpha, query.lam))
    eig = np.linalg.eigvals(amplification_matrix(query.tab, query.h_alpha, query.lam))
    rho = float(np.max(np.abs(eig)))
    verdict = StabilityVerdict(
        gamma=g,
        criterion=abs(g) < 1.0 + query.lam,
        eigenvalues=eig,
        rho=rho,
        marginal=query.lam == 1.0 or abs(rho - 1.0) <= BOUNDARY_BAND,
        empirical=empirical_decay(query, empirical_steps) if empirical_steps > 0 else None,
    )
    if not verdict.consistent:
        logger.warning(
            "Γ criterion and spectral radius disagree at hα=%g, λ=%g (Γ=%g, ρ=%g)",
            query.h_alpha, query.lam, g, rho,
        )
    return verdict


def empirical_decay(query: StabilityQuery, n_steps: int = 10000) -> str:
    """
    Run the reversible scheme on dy/dt = hα·y with unit steps from y = z = 1.

    Returns "decays" once ‖(y, z)‖ drops below 1e-8 of its initial size,
    "blows_up" once it exceeds 1e8 times it, otherwise "inconclusive".
    """
    field = linear_field(query.h_alpha)
    s = ReversibleState.initial(0.0, [1.0])
    size0 = np.linalg.norm(s.stacked())
    for _ in range(n_steps):
        s = forward_step(s, field, query.tab, 1.0, query.lam)
        size = np.linalg.norm(s.stacked())
        if size < DECAY_THRESHOLD * size0:
            return DECAYS
        if not size < BLOWUP_THRESHOLD * size0:
            return BLOWS_UP
    return INCONCLUSIVE


def empirical_decay_grid(
    tab: ButcherTableau, lams: np.ndarray, h_alphas: np.ndarray, n_steps: int = 10000
) -> np.ndarray:
    """
    Vectorized `empirical_decay` over matching arrays of λ and hα.

    On the linear field each increment is R(±hα) times its input, so the
    recurrence is iterated on arrays directly.
    """
    lams = np.asarray(lams, dtype=np.float64)
    h_alphas = np.asarray(h_alphas, dtype=np.float64)
    r_plus = transfer_function(tab, h_alphas)
    r_minus = transfer_function(tab, -h_alphas)
    y = np.ones_like(h_alphas)
    z = np.ones_like(h_alphas)
    size0 = np.sqrt(2.0)
    outcome = np.full(h_alphas.shape, INCONCLUSIVE, dtype=object)
    active = np.ones(h_alphas.shape, dtype=bool)
    for _ in range(n_steps):
        y = lams * y + (1.0 - lams) * z + r_plus * z
        z = z - r_minus * y
        size = np.hypot(y, z)
        decayed = active & (size < DECAY_THRESHOLD * size0)
        blown = active & ~(size < BLOWUP_THRESHOLD * size0)
        outcome[decayed] = DECAYS
        outcome[blown] = BLOWS_UP
        active &= ~(decayed | blown)
        y = np.where(active, y, 0.0)
        z = np.where(active, z, 0.0)
        if not active.any():
            break
    return outcome


def routh_hurwitz(tab: ButcherTableau, h_alpha: float, lam: float) -> Dict[str, object]:
    """
    Coefficients of the Möbius-transformed characteristic polynomial.

    With e = (1 + w)/(1 - w), e² - Γe + λ becomes
    (1 + λ + Γ)w² + 2(1 - λ)w + (1 + λ - Γ); the roots lie inside the unit
    circle iff all three coefficients are positive.
    """
    g = float(gamma(tab, h_alpha, lam))
    coefficients = (1.0 + lam - g, 2.0 * (1.0 - lam), 1.0 + lam + g)
    return {"coefficients": coefficients, "stable": all(c > 0.0 for c in coefficients)}


def legacy_amplification_matrix(name: str, h_alpha: float) -> np.ndarray:
    """
    Amplification matrix of an earlier reversible scheme on the test problem.

    Both have determinant -1, so their spectral radius is never below one.
    """
    z = h_alpha
    if name == "reversible_heun":
        return np.array([[1.0 + z, 0.5 * z * z], [2.0, z - 1.0]])
    if name == "asynchronous_leapfrog":
        return np.array([[1.0 + z, 0.5 * z], [2.0 * z, z - 1.0]])
    raise ConfigurationError(f"unknown legacy scheme {name!r}; choose from {', '.join(LEGACY_SCHEMES)}")


def verdict_grid(
    tab: ButcherTableau,
    lams: Sequence[float],
    h_alphas: Sequence[float],
    empirical_steps: int = 0,
    include_legacy: bool = False,
) -> List[dict]:
    """
    Stability table over every (λ, hα) pair.

    Returns rows with keys lambda, h_alpha, gamma, rho, stable, marginal and,
    when requested, empirical and the legacy schemes' spectral radii.
    """
    for lam in lams:
        Coupling(lam)
    lam_grid, ha_grid = np.meshgrid(np.asarray(lams, float), np.asarray(h_alphas, float), indexing="ij")
    lam_flat, ha_flat = lam_grid.ravel(), ha_grid.ravel()
    r_plus = transfer_function(tab, ha_flat)
    r_minus = transfer_function(tab, -ha_flat)
    g = 1.0 + lam_flat - (1.0 - lam_flat) * r_minus - r_minus * r_plus
    mats = np.empty((ha_flat.size, 2, 2))
    mats[:, 0, 0] = lam_flat
    mats[:, 0, 1] = 1.0 - lam_flat + r_plus
    mats[:, 1, 0] = -lam_flat * r_minus
    mats[:, 1, 1] = 1.0 - (1.0 - lam_flat) * r_minus - r_minus * r_plus
    rho = np.max(np.abs(np.linalg.eigvals(mats)), axis=1)
    stable = np.abs(g) < 1.0 + lam_flat
    empirical = empirical_decay_grid(tab, lam_flat, ha_flat, empirical_steps) if empirical_steps > 0 else None

    legacy = {}
    if include_legacy:
        for name in LEGACY_SCHEMES:
            legacy[name] = [
                float(np.max(np.abs(np.linalg.eigvals(legacy_amplification_matrix(name, x))))) for x in ha_flat
            ]

    rows = []
    for k in range(ha_flat.size):
        row = {
            "lambda": float(lam_flat[k]),
            "h_alpha": float(ha_flat[k]),
            "gamma": float(g[k]),
            "rho": float(rho[k]),
            "stable": bool(stable[k]),
            "marginal": bool(lam_flat[k] == 1.0 or abs(rho[k] - 1.0) <= BOUNDARY_BAND),
        }
        if empirical is not None:
            row["empirical"] = empirical[k]
        for name, values in legacy.items():
            row[f"rho_{name}"] = values[k]
        rows.append(row)
    return rows


def boundary_root(tab: ButcherTableau, lam: float, lo: float = -10.0, tol: float = 1e-12) -> Optional[float]:
    """
    Left end of the stability interval ending at hα = 0, by bisection.

    Returns None when the criterion already fails just left of 0 (as it
    does at λ = 1), and `lo` when it never fails on [lo, 0).
    """
    hi = -tol
    if not abs(gamma(tab, hi, lam)) < 1.0 + lam:
        return None
    if abs(gamma(tab, lo, lam)) < 1.0 + lam:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if abs(gamma(tab, mid, lam)) < 1.0 + lam:
            hi = mid
        else:
            lo = mid
    return hi


def region_scan(tab: ButcherTableau, lams: Sequence[float], h_alphas: Sequence[float]) -> List[dict]:
    """
    Per λ, the most negative grid hα of the stable run adjacent to hα = 0.

    Args:
        tab: Base tableau
        lams: Couplings to scan
        h_alphas: Sorted negative grid

    Returns:
        List[dict]: Rows with lambda, boundary_h_alpha (None when nothing is
        stable), boundary_root and marginal
    """
    grid = np.asarray(h_alphas, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) <= 0.0):
        raise ConfigurationError("the hα grid must be non-empty and sorted ascending")
    if grid[-1] >= 0.0:
        raise ConfigurationError("region scans need hα < 0")
    rows = []
    for lam in lams:
        Coupling(lam)
        stable = np.abs(gamma(tab, grid, lam)) < 1.0 + lam
        boundary = None
        for k in range(grid.size - 1, -1, -1):
            if not stable[k]:
                break
            boundary = float(grid[k])
        rows.append(
            {
                "lambda": float(lam),
                "boundary_h_alpha": boundary,
                "boundary_root": boundary_root(tab, lam, lo=float(grid[0])),
                "marginal": lam == 1.0,
            }
        )
    return rows
