"""Azimuthal mode forms of the full second variation.

In-plane sector (w0, w1, w2): one form P_m per |m|.  Out-of-plane sector: the
complex field w3 + i w4 couples Fourier index n with k - n, giving one paired
form per unordered pair (or a split real/imaginary form when n = k - n).
Winding numbers other than +-1 are handled by the same algebra and flagged as
an extension in every output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import model
from .errors import CriticalRegimeError, NoNegativeDirection
from .fem import assemble_form, mass_matrix
from .model import SQRT2, SQRT6, ModelParams, Regime
from .radial import Profile, QuadState
from .spectrum import QuadForm, SpectrumResult, lowest_spectrum
from .stability import _check_compact, _require_converged, assemble_B, b_density

log = logging.getLogger(__name__)

SCAN_COUNT = 5


@dataclass(frozen=True)
class ModeSpec:
    sector: str  # "V1" or "V2"
    m_or_n: int
    k: int

    def __post_init__(self) -> None:
        if self.sector not in {"V1", "V2"}:
            raise ValueError(f"unknown sector {self.sector!r}")
        if self.sector == "V1" and self.m_or_n < 0:
            raise ValueError("V1 modes are indexed by m >= 0")

    @property
    def partner(self) -> int | None:
        return self.k - self.m_or_n if self.sector == "V2" else None

    @property
    def self_paired(self) -> bool:
        return self.sector == "V2" and 2 * self.m_or_n == self.k

    @property
    def component_roles(self) -> tuple[str, ...]:
        if self.sector == "V1":
            return ("w0", "w1", "w2")
        if self.self_paired:
            return (f"Re xi_{self.m_or_n}", f"Im xi_{self.m_or_n}")
        return (f"xi_{self.m_or_n}", f"xi_{self.partner}")

    @property
    def extension(self) -> bool:
        return abs(self.k) != 1

    @property
    def label(self) -> str:
        if self.sector == "V1":
            return f"P{self.m_or_n}(k={self.k})"
        return f"V2pair({self.m_or_n},{self.partner};k={self.k})"

    def canonical(self) -> "ModeSpec":
        """V2 pairs are unordered; pick the smaller index first."""
        if self.sector == "V2" and self.partner < self.m_or_n:
            return ModeSpec("V2", self.partner, self.k)
        return self


# --------------------------------------------------------------------------- constraint maps


def constraint_map(n_nodes: int, ncomp: int, pinned0: list[int], rotated0: tuple[int, int] | None = None) -> sp.csr_matrix:
    """Free-to-full map: every component pinned at the last node, ``pinned0`` at r = 0.

    ``rotated0=(i, j)`` keeps only (w_i + w_j)/sqrt2 free at r = 0 (the
    difference is pinned).
    """
    n_full = n_nodes * ncomp
    pinned = set(pinned0) | set(range(n_full - ncomp, n_full))
    rows, cols, vals = [], [], []
    col = 0
    if rotated0 is not None:
        i, j = rotated0
        pinned |= {i, j}
        rows += [i, j]
        cols += [0, 0]
        vals += [1.0 / SQRT2, 1.0 / SQRT2]
        col = 1
    free = [d for d in range(n_full) if d not in pinned]
    rows += free
    cols += list(range(col, col + len(free)))
    vals += [1.0] * len(free)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_full, col + len(free)))


# --------------------------------------------------------------------------- V1 sector


def pm_potential(params: ModelParams, m: int, r, u, v) -> np.ndarray:
    """(3, 3, ...) potential of P_m in the (w0, w1, w2) ordering."""
    k = params.k
    am, ak = abs(m), abs(k)
    ir2 = 1.0 / r**2
    f_pp, f_pq, f_qq = model.bulk_hessian_entries(params, u, v)
    a2_term = -params.a2 + 2.0 * params.b2 * v / SQRT6 + params.c2 * (u * u + v * v)
    # one shared singular factor so the combination on (w1 + w2) cancels exactly when |m| = |k|
    sing = float(am * am + ak * ak) * ir2
    pot = np.zeros((3, 3) + np.shape(u))
    pot[0, 0] = float(m * m) * ir2 + f_qq
    pot[1, 1] = sing + f_pp
    pot[2, 2] = sing + a2_term
    pot[1, 2] = pot[2, 1] = -float(2 * am * ak) * ir2
    pot[0, 1] = pot[1, 0] = f_pq
    return pot


def pm_density(params: ModelParams, m: int, r, u, v, w, dw) -> np.ndarray:
    """Integrand of P_m for component samples w = (w0, w1, w2) and derivatives dw."""
    pot = pm_potential(params, m, r, u, v)
    out = sum(d * d for d in dw)
    for i in range(3):
        for j in range(3):
            out = out + pot[i, j] * w[i] * w[j]
    return out


def assemble_Pm(profile: Profile, m: int, mass: str = "l2") -> QuadForm:
    """P_m for the profile's winding number.

    r = 0 constraints: w0 free only for m = 0; when |m| = |k| only
    (w1 - w2)/sqrt2 is pinned; otherwise w1 and w2 are pinned.
    ``mass="hardy"`` uses the pairing int sum w_l^2 / r dr.
    """
    if m < 0:
        raise ValueError("P_m depends on |m| only; pass m >= 0")
    _require_converged(profile)
    params = profile.params
    st = QuadState.from_profile(profile)
    K = assemble_form(st.quad, pm_potential(params, m, st.r, st.u, st.v))
    if mass == "l2":
        M = mass_matrix(st.quad, 3)
    elif mass == "hardy":
        w = np.broadcast_to(1.0 / st.r**2, (3,) + st.r.shape)
        M = mass_matrix(st.quad, 3, w)
    else:
        raise ValueError(f"unknown mass {mass!r}")
    pinned0 = [] if m == 0 else [0]
    rotated = None
    if m == abs(params.k):
        rotated = (1, 2)
    else:
        pinned0 += [1, 2]
    T = constraint_map(profile.mesh.n_nodes, 3, pinned0, rotated)
    spec = ModeSpec("V1", m, params.k)
    return QuadForm(
        K, M, T, 3, spec.label, scale=model.energy_scale(params), extension=spec.extension, meta={"sector": "V1", "m": m}
    )


def _samples(quad, arr):
    arr = np.asarray(arr, dtype=float)
    return quad.values(arr), quad.derivs(arr)


def pm_value(profile: Profile, m: int, w0, w1, w2, nq: int | None = None) -> float:
    """P_m on nodal samples by direct quadrature."""
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    ws = [_samples(st.quad, w) for w in (w0, w1, w2)]
    dens = pm_density(profile.params, m, st.r, st.u, st.v, [a for a, _ in ws], [b for _, b in ws])
    return st.integrate(dens)


def split_P0(profile: Profile, w0, w1, w2, nq: int | None = None) -> tuple[float, float, float]:
    """(B(w1, w0), int (zeta')^2 u^2 r dr with zeta = w2/u, P_0(w0, w1, w2))."""
    _check_compact(w0, w1, w2)
    p = profile.params
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    (a0, d0), (a1, d1), (a2, d2) = (_samples(st.quad, w) for w in (w0, w1, w2))
    b_part = st.integrate(b_density(p, st.r, st.u, st.v, a1, d1, a0, d0))
    dzeta = (d2 * st.u - a2 * st.du) / st.u**2
    f_part = st.integrate(dzeta**2 * st.u**2)
    full = st.integrate(pm_density(p, 0, st.r, st.u, st.v, [a0, a1, a2], [d0, d1, d2]))
    return b_part, f_part, full


@dataclass(frozen=True)
class HardyFactors:
    """Nodal samples of the Hardy factors; eta is absent in the Critical regime."""

    xi: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray | None = None


@dataclass(frozen=True)
class HardySplit:
    J: float
    I: float
    sos_I: float
    P: float

    @property
    def split_error(self) -> float:
        return abs(self.P - self.J - self.I) / max(1.0, abs(self.P))

    @property
    def sos_error(self) -> float:
        return abs(self.I - self.sos_I) / max(1.0, abs(self.I))


def hardy_split_Jm_Im(profile: Profile, m: int, factors: HardyFactors, nq: int | None = None) -> HardySplit:
    """J_m, I_m, the sum-of-squares form of I_m, and P_m(v' eta, u' xi, u zeta).

    Requires |k| = 1, m >= 1 and a non-Critical profile.  Second derivatives
    of the profile come from the ODE.
    """
    if m < 1:
        raise ValueError("the J/I split needs m >= 1")
    params = profile.params
    if abs(params.k) != 1:
        raise ValueError("the J/I split is stated for |k| = 1")
    if model.classify(params) is Regime.CRITICAL:
        raise CriticalRegimeError(
            "v' vanishes identically in the Critical regime; w0 decouples, use assemble_Pm with w0 = 0"
        )
    if factors.eta is None:
        raise ValueError("eta factor is required outside the Critical regime")
    _check_compact(factors.xi, factors.zeta, factors.eta)
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    q = st.quad
    xi, dxi = _samples(q, factors.xi)
    ze, dze = _samples(q, factors.zeta)
    et, det = _samples(q, factors.eta)
    r, u, du, v, dv = st.r, st.u, st.du, st.v, st.dv
    b2, c2 = params.b2, params.c2

    w = [dv * et, du * xi, u * ze]
    dw = [st.d2v * et + dv * det, st.d2u * xi + du * dxi, du * ze + u * dze]
    P = st.integrate(pm_density(params, m, r, u, v, w, dw))

    J = st.integrate(
        dv**2 * det**2 + du**2 * dxi**2 + (m * m - 1) * dv**2 * et**2 / r**2
        - 2.0 * u * dv * du * (b2 / SQRT6 + c2 * v) * (xi - et) ** 2
    )
    I = st.integrate(
        (m * m - 1) * du**2 * xi**2 / r**2
        + m * m * u**2 * ze**2 / r**2
        + u**2 * dze**2
        + 2.0 * u * du * xi**2 / r**3
        - 4.0 * m * u * du * xi * ze / r**2
    )
    sos = st.integrate(
        (m - 1) ** 2 * (du**2 * xi**2 + u**2 * ze**2) / r**2
        + 2.0 * (m - 1) * (du * xi - u * ze) ** 2 / r**2
        + 2.0 * u * du * (xi - ze * r) ** 2 / r**3
        + u**2 * (ze + dze * r) ** 2 / r**2
    )
    return HardySplit(J=J, I=I, sos_I=sos, P=P)


# --------------------------------------------------------------------------- translation kernel


def smooth_step(x: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.clip(x, 0.0, 1.0)
    a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def smooth_step_deriv(x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    return (smooth_step(x + h) - smooth_step(x - h)) / (2.0 * h)


@dataclass(frozen=True)
class KernelCheck:
    rayleigh: float
    form_value: float
    mass_value: float
    r_eff: float
    plateau: float
    lambda_1: float | None = None
    lambda_2: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def kernel_check_m1(profile: Profile, plateau: float = 0.5, nq: int | None = None, with_spectrum: bool = False) -> KernelCheck:
    """Rayleigh quotient of chi * (v', u', u/r) in P_1 against L^2(r dr).

    chi = 1 on [0, plateau * R_eff] and steps smoothly to 0 at R_eff, which
    makes the triple admissible (u' does not vanish at R_eff).  The quotient is
    invariant under scaling the triple.
    """
    params = profile.params
    if abs(params.k) != 1:
        raise ValueError("translation kernel check needs |k| = 1")
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    r, u, du, v, dv = st.r, st.u, st.du, st.v, st.dv
    R = profile.mesh.r_eff
    x = (R - r) / ((1.0 - plateau) * R)
    chi = smooth_step(x)
    dchi = -smooth_step_deriv(x) / ((1.0 - plateau) * R)
    t = [dv, du, u / r]
    dt = [st.d2v, st.d2u, du / r - u / r**2]
    w = [chi * a for a in t]
    dw = [dchi * a + chi * b for a, b in zip(t, dt)]
    form = st.integrate(pm_density(params, 1, r, u, v, w, dw))
    mass = st.integrate(sum(a * a for a in w))
    l1 = l2 = None
    if with_spectrum:
        sr = lowest_spectrum(assemble_Pm(profile, 1), 2)
        l1, l2 = float(sr.eigenvalues[0]), float(sr.eigenvalues[1])
    return KernelCheck(form / mass, form, mass, R, plateau, l1, l2)


# --------------------------------------------------------------------------- V2 sector


def v2_potential(params: ModelParams, n: int, r, u, v) -> np.ndarray:
    """(2, 2, ...) potential; (xi_n, xi_{k-n}) or (Re, Im) of xi_n when self-paired."""
    k = params.k
    j = k - n
    ir2 = 1.0 / r**2
    W = -params.a2 - params.b2 * v / SQRT6 + params.c2 * (u * u + v * v)
    cross = -(SQRT2 / 2.0) * params.b2 * u
    pot = np.zeros((2, 2) + np.shape(u))
    if n == j:
        pot[0, 0] = n * n * ir2 + W + cross
        pot[1, 1] = n * n * ir2 + W - cross
    else:
        pot[0, 0] = n * n * ir2 + W
        pot[1, 1] = j * j * ir2 + W
        pot[0, 1] = pot[1, 0] = cross
    return pot


def assemble_V2_pair(profile: Profile, n: int) -> QuadForm:
    _require_converged(profile)
    params = profile.params
    spec = ModeSpec("V2", n, params.k).canonical()
    n = spec.m_or_n
    j = params.k - n
    st = QuadState.from_profile(profile)
    K = assemble_form(st.quad, v2_potential(params, n, st.r, st.u, st.v))
    M = mass_matrix(st.quad, 2)
    if n == j:
        pinned0 = [0, 1] if n != 0 else []
    else:
        pinned0 = [c for c, idx in ((0, n), (1, j)) if idx != 0]
    T = constraint_map(profile.mesh.n_nodes, 2, pinned0)
    return QuadForm(
        K, M, T, 2, spec.label, scale=model.energy_scale(params), extension=spec.extension,
        meta={"sector": "V2", "n": n, "partner": j},
    )


def v2_pair_value(profile: Profile, n: int, xi_n, xi_j, nq: int | None = None) -> float:
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    a, da = _samples(st.quad, xi_n)
    b, db = _samples(st.quad, xi_j)
    pot = v2_potential(profile.params, n, st.r, st.u, st.v)
    dens = da**2 + db**2 + pot[0, 0] * a * a + 2 * pot[0, 1] * a * b + pot[1, 1] * b * b
    return st.integrate(dens)


def v2_lower_bound_check(profile: Profile, n: int, xi_n, xi_partner, nq: int | None = None) -> tuple[float, float]:
    """(paired form value, int b2/sqrt2 (-sqrt3 v - u)(xi_n^2 + xi_{1-n}^2) r dr) for n >= 2, |k| = 1."""
    k = profile.params.k
    if abs(k) != 1:
        raise ValueError("the lower bound is stated for |k| = 1")
    if (k == 1 and n < 2) or (k == -1 and n > -2):
        raise ValueError("the lower bound needs both indices outside {0, k}")
    _check_compact(xi_n, xi_partner)
    lhs = v2_pair_value(profile, n, xi_n, xi_partner, nq)
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    a = st.quad.values(np.asarray(xi_n, float))
    b = st.quad.values(np.asarray(xi_partner, float))
    rhs = st.integrate(profile.params.b2 / SQRT2 * (-math.sqrt(3.0) * st.v - st.u) * (a * a + b * b))
    return lhs, rhs


# --------------------------------------------------------------------------- scans


@dataclass
class ModeScanEntry:
    sector: str
    m_or_n: int
    k: int
    lambda_min: float
    extension_flag: bool
    eigenvalues: list[float] = field(default_factory=list)
    max_residual: float = math.nan

    def to_dict(self) -> dict:
        return {
            "sector": self.sector,
            "m_or_n": self.m_or_n,
            "k": self.k,
            "lambda_min": self.lambda_min,
            "extension_flag": self.extension_flag,
        }


@dataclass
class ModeScan:
    entries: list[ModeScanEntry]
    most_negative: SpectrumResult | None
    most_negative_spec: ModeSpec | None

    @property
    def lambda_min(self) -> float:
        return min(e.lambda_min for e in self.entries)

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]


def default_ranges(k: int) -> tuple[range, range]:
    ak = abs(k)
    return range(0, ak + 3), range(-2, ak + 3)


def form_for(profile: Profile, spec: ModeSpec) -> QuadForm:
    if spec.sector == "V1":
        return assemble_Pm(profile, spec.m_or_n)
    return assemble_V2_pair(profile, spec.m_or_n)


def mode_scan(profile: Profile, m_range=None, n_range=None, count: int = SCAN_COUNT) -> ModeScan:
    """Lowest eigenvalues of every V1 form in ``m_range`` and V2 pair in ``n_range``."""
    k = profile.params.k
    dm, dn = default_ranges(k)
    m_range = dm if m_range is None else m_range
    n_range = dn if n_range is None else n_range
    specs = [ModeSpec("V1", m, k) for m in m_range]
    seen = set()
    for n in n_range:
        s = ModeSpec("V2", n, k).canonical()
        if s not in seen:
            seen.add(s)
            specs.append(s)
    entries, best, best_spec = [], None, None
    scale = model.energy_scale(profile.params)
    for spec in specs:
        sr = lowest_spectrum(form_for(profile, spec), count, shift=-0.1 * scale)
        entries.append(
            ModeScanEntry(spec.sector, spec.m_or_n, k, sr.lambda_min, spec.extension, [float(x) for x in sr.eigenvalues], float(sr.residuals.max()))
        )
        if best is None or sr.lambda_min < best.lambda_min:
            best, best_spec = sr, spec
    return ModeScan(entries, best, best_spec)


def instability_search(profile: Profile, count: int = SCAN_COUNT) -> ModeScan:
    """Scan m in 0..|k|+2 and n in -2..|k|+2; raise NoNegativeDirection if nothing is negative."""
    k = profile.params.k
    if abs(k) < 2:
        raise ValueError("instability search is for |k| >= 2; use mode_scan for the |k| = 1 control")
    scan = mode_scan(profile, count=count)
    if scan.lambda_min >= 0.0:
        raise NoNegativeDirection(f"no negative eigenvalue among {len(scan.entries)} forms (lambda_min={scan.lambda_min:.3e})")
    return scan


def claim_i_bound(profile: Profile, m: int) -> float:
    """Smallest eigenvalue of P_m against int sum w_l^2 / r dr; expected >= 1 for m >= 2, |k| = 1."""
    if m < 2:
        raise ValueError("the weighted bound concerns m >= 2")
    return lowest_spectrum(assemble_Pm(profile, m, mass="hardy"), 1).lambda_min


def critical_coupling(profile: Profile, m: int) -> float:
    """Largest |K_{w0, w1/w2}| entry relative to the largest |K| entry of P_m."""
    K = assemble_Pm(profile, m).K_full.tocoo()
    sel = ((K.row % 3 == 0) & (K.col % 3 != 0)) | ((K.row % 3 != 0) & (K.col % 3 == 0))
    top = np.max(np.abs(K.data))
    return float(np.max(np.abs(K.data[sel])) / top) if np.any(sel) else 0.0


def b_equals_p0_block(profile: Profile) -> float:
    """Max difference between B and the (w1, w0) block of P_0 (sanity check of the m = 0 reduction)."""
    B = assemble_B(profile).K_full.tocsr()
    P = assemble_Pm(profile, 0).K_full.tocsr()
    n = profile.mesh.n_nodes
    idx_xi = np.arange(n) * 3 + 1
    idx_eta = np.arange(n) * 3
    perm = np.empty(2 * n, dtype=int)
    perm[0::2], perm[1::2] = idx_xi, idx_eta
    sub = P[perm][:, perm]
    return float(abs(sub - B).max())
