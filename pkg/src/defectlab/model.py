"""Bulk potential, far-field constants and parameter handling.

Conventions: the reduced bulk density is

    f(p, q) = -a2/2 (p^2+q^2) + c2/4 (p^2+q^2)^2 - b2/(3 sqrt6) q (q^2 - 3 p^2)

where ``p`` plays the role of the in-plane order ``u`` and ``q`` of the
out-of-plane order ``v``.  All coefficients are used as given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)
SQRT6 = math.sqrt(6.0)

CRITICAL_RTOL = 1e-10


class Regime(str, Enum):
    SUBCRITICAL = "SubCritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "SuperCritical"


@dataclass(frozen=True)
class FiniteDisk:
    R: float

    def __post_init__(self) -> None:
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ValueError(f"disk radius must be positive and finite, got {self.R}")

    @property
    def is_finite(self) -> bool:
        return True

    def __str__(self) -> str:
        return f"{self.R:g}"


@dataclass(frozen=True)
class WholePlane:
    @property
    def is_finite(self) -> bool:
        return False

    def __str__(self) -> str:
        return "inf"


Domain = Union[FiniteDisk, WholePlane]


def parse_domain(value: float | str | Domain) -> Domain:
    """Accept ``inf``/``"inf"`` for the whole plane, a positive number otherwise."""
    if isinstance(value, (FiniteDisk, WholePlane)):
        return value
    if isinstance(value, str):
        if value.strip().lower() in {"inf", "infinity", "+inf"}:
            return WholePlane()
        value = float(value)
    if math.isinf(value) and value > 0:
        return WholePlane()
    return FiniteDisk(float(value))


@dataclass(frozen=True)
class ModelParams:
    a2: float
    b2: float
    c2: float
    k: int = 1
    domain: Domain = WholePlane()

    def __post_init__(self) -> None:
        if not self.a2 >= 0:
            raise ValueError(f"a2 must be >= 0, got {self.a2}")
        if not self.b2 > 0:
            raise ValueError(f"b2 must be > 0, got {self.b2}")
        if not self.c2 > 0:
            raise ValueError(f"c2 must be > 0, got {self.c2}")
        if int(self.k) != self.k or self.k == 0:
            raise ValueError(f"k must be a nonzero integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "domain", parse_domain(self.domain))

    @property
    def finite(self) -> bool:
        return self.domain.is_finite

    def with_(self, **changes) -> "ModelParams":
        data = dict(a2=self.a2, b2=self.b2, c2=self.c2, k=self.k, domain=self.domain)
        data.update(changes)
        return ModelParams(**data)

    def to_dict(self) -> dict:
        R = self.domain.R if self.finite else "inf"
        return {"a2": self.a2, "b2": self.b2, "c2": self.c2, "k": self.k, "radius": R}


@dataclass(frozen=True)
class BulkConstants:
    s_plus: float
    s_minus: float
    regime: Regime

    @property
    def u_star(self) -> float:
        return self.s_plus / SQRT2

    @property
    def v_star(self) -> float:
        return -self.s_plus / SQRT6


@dataclass(frozen=True)
class AsymptoticCoeffs:
    p1: float
    q1: float


def classify(params: ModelParams) -> Regime:
    lhs = params.b2**2
    rhs = 3.0 * params.a2 * params.c2
    if abs(lhs - rhs) <= CRITICAL_RTOL * max(lhs, rhs):
        return Regime.CRITICAL
    return Regime.SUBCRITICAL if lhs < rhs else Regime.SUPERCRITICAL


def bulk_constants(params: ModelParams) -> BulkConstants:
    a2, b2, c2 = params.a2, params.b2, params.c2
    disc = math.sqrt(b2 * b2 + 24.0 * a2 * c2)
    s_plus = (b2 + disc) / (4.0 * c2)
    # b2 - disc loses all digits when a2*c2 << b2^2; use the product of roots instead
    s_minus = -3.0 * a2 / (2.0 * c2 * s_plus)
    if s_minus == 0.0:
        s_minus = -0.0
    return BulkConstants(s_plus=s_plus, s_minus=s_minus, regime=classify(params))


def energy_scale(params: ModelParams) -> float:
    """Magnitude of the bulk Hessian at the far-field state; used to scale eigenvalue tolerances."""
    s = bulk_constants(params).s_plus
    return params.a2 + params.b2 * s + params.c2 * s * s


def bulk_f(params: ModelParams, p, q):
    a2, b2, c2 = params.a2, params.b2, params.c2
    rho2 = p * p + q * q
    return -0.5 * a2 * rho2 + 0.25 * c2 * rho2 * rho2 - b2 / (3.0 * SQRT6) * q * (q * q - 3.0 * p * p)


def bulk_grad(params: ModelParams, p, q):
    """Return ``(h, g) = (df/dp, df/dq)``."""
    a2, b2, c2 = params.a2, params.b2, params.c2
    rho2 = p * p + q * q
    h = p * (-a2 + math.sqrt(2.0 / 3.0) * b2 * q + c2 * rho2)
    g = q * (-a2 - b2 * q / SQRT6 + c2 * rho2) + b2 * p * p / SQRT6
    return h, g


def bulk_hessian_entries(params: ModelParams, p, q):
    """Return ``(f_pp, f_pq, f_qq)``; works elementwise on arrays."""
    a2, b2, c2 = params.a2, params.b2, params.c2
    f_pp = -a2 + 2.0 * b2 * q / SQRT6 + c2 * (3.0 * p * p + q * q)
    f_pq = 2.0 * p * (b2 / SQRT6 + c2 * q)
    f_qq = -a2 - 2.0 * b2 * q / SQRT6 + c2 * (p * p + 3.0 * q * q)
    return f_pp, f_pq, f_qq


def bulk_hessian(params: ModelParams, p: float, q: float) -> np.ndarray:
    f_pp, f_pq, f_qq = bulk_hessian_entries(params, p, q)
    return np.array([[f_pp, f_pq], [f_pq, f_qq]], dtype=float)


def asymptotic_coeffs(params: ModelParams) -> AsymptoticCoeffs:
    """Leading r^-2 corrections of (u, v) about the far-field state on the whole plane."""
    if params.finite:
        raise ValueError("asymptotic coefficients are defined for the whole plane only")
    b2, c2, k2 = params.b2, params.c2, float(params.k**2)
    s = bulk_constants(params).s_plus
    denom = b2 * (-b2 + 4.0 * c2 * s)
    p1 = -(SQRT2 * k2 / 2.0) * (2.0 * b2 + c2 * s) / denom
    q1 = -(SQRT6 * k2 / 2.0) * (-b2 + c2 * s) / denom
    return AsymptoticCoeffs(p1=p1, q1=q1)


@dataclass(frozen=True)
class MinimaReport:
    locations: tuple[tuple[float, float], ...]
    value: float
    printed_constant: float
    corrected_constant: float
    grid_value: float

    @property
    def discrepancy(self) -> float:
        return self.printed_constant - self.value

    def to_dict(self) -> dict:
        return {
            "locations": [list(p) for p in self.locations],
            "value": self.value,
            "grid_scan_value": self.grid_value,
            "printed_constant": self.printed_constant,
            "printed_minus_numeric": self.discrepancy,
            "corrected_constant_c2_over_9": self.corrected_constant,
        }


def _newton_polish(params: ModelParams, p: float, q: float, steps: int = 50) -> tuple[float, float]:
    for _ in range(steps):
        h, g = bulk_grad(params, p, q)
        H = bulk_hessian(params, p, q)
        try:
            dp, dq = np.linalg.solve(H, [-h, -g])
        except np.linalg.LinAlgError:
            break
        p, q = p + dp, q + dq
        if abs(dp) + abs(dq) <= 1e-15 * (1.0 + abs(p) + abs(q)):
            break
    return float(p), float(q)


def minima_of_f(params: ModelParams, grid_n: int = 801, half_width: float | None = None) -> MinimaReport:
    """Global minimizers of f and the minimum value, found numerically.

    A dense grid scan picks the basin, Newton on the gradient polishes it.  The
    closed-form constant quoted in the literature (with a c2 s^4 / 6 term) is
    reported next to the numeric value rather than trusted.
    """
    bc = bulk_constants(params)
    s = bc.s_plus
    if half_width is None:
        half_width = max(2.0, 1.5 * s)
    xs = np.linspace(-half_width, half_width, grid_n)
    P, Qg = np.meshgrid(xs, xs, indexing="ij")
    F = bulk_f(params, P, Qg)
    i, j = np.unravel_index(np.argmin(F), F.shape)
    grid_value = float(F[i, j])
    p0, q0 = _newton_polish(params, float(P[i, j]), float(Qg[i, j]))
    value = float(bulk_f(params, p0, q0))

    locations = ((0.0, 2.0 * s / SQRT6), (s / SQRT2, -s / SQRT6), (-s / SQRT2, -s / SQRT6))
    polished = [_newton_polish(params, *loc) for loc in locations]
    value = min([value] + [float(bulk_f(params, *loc)) for loc in polished])

    a2, b2, c2 = params.a2, params.b2, params.c2
    printed = -a2 / 3.0 * s**2 - 2.0 * b2 / 27.0 * s**3 + c2 / 6.0 * s**4
    corrected = -a2 / 3.0 * s**2 - 2.0 * b2 / 27.0 * s**3 + c2 / 9.0 * s**4
    return MinimaReport(
        locations=tuple(polished),
        value=value,
        printed_constant=printed,
        corrected_constant=corrected,
        grid_value=grid_value,
    )
