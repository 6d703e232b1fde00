"""Radial defect profiles (u, v): meshing, Newton solve and diagnostics.

The profile solves, weakly with weight r,

    u'' + u'/r - k^2 u / r^2 = h(u, v),     v'' + v'/r = g(u, v)

with u(0) = 0 essential, v'(0) = 0 natural, and far-field data at r = R_eff.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .errors import NonConvergence, SignViolation
from .fem import Grading, Quadrature, RadialMesh, assemble_form, graded_vertices, lagrange_tables
from .model import SQRT2, SQRT3, SQRT6, ModelParams, Regime

log = logging.getLogger(__name__)

MIN_ELEMENTS = 16
DEFAULT_ELEMENTS = 2000
DEFAULT_DEGREE = 5
DEFAULT_STRETCH = 1.5
TRUNCATION_FACTOR = 1e-3
NEWTON_TOL = 1e-10
MAX_NEWTON = 50
CONTINUATION_STEPS = 10


# --------------------------------------------------------------------------- mesh


def truncation_radius(params: ModelParams, factor: float = TRUNCATION_FACTOR) -> float:
    """Smallest R with |p1| / R^2 <= factor * s_plus."""
    s = model.bulk_constants(params).s_plus
    p1 = model.asymptotic_coeffs(params).p1
    return math.sqrt(abs(p1) / (factor * s))


def build_mesh(
    params: ModelParams,
    n_elements: int = DEFAULT_ELEMENTS,
    grading: Grading | None = None,
    degree: int = DEFAULT_DEGREE,
    r_eff: float | None = None,
) -> RadialMesh:
    if n_elements < MIN_ELEMENTS:
        raise ValueError(f"n_elements must be >= {MIN_ELEMENTS}, got {n_elements}")
    if grading is None:
        grading = Grading.stretched(n_elements, DEFAULT_STRETCH)
    if r_eff is None:
        r_eff = params.domain.R if params.finite else truncation_radius(params)
    elif params.finite and not math.isclose(r_eff, params.domain.R):
        raise ValueError("r_eff override is only meaningful on the whole plane")
    if not r_eff > 0:
        raise ValueError("effective radius must be positive")
    return RadialMesh(graded_vertices(float(r_eff), n_elements, grading), degree, grading)


# --------------------------------------------------------------------------- profile


def boundary_values(params: ModelParams, r_eff: float) -> tuple[float, float]:
    """Dirichlet data at r_eff; on the whole plane it carries the r^-2 correction."""
    s = model.bulk_constants(params).s_plus
    u_b, v_b = s / SQRT2, -s / SQRT6
    if not params.finite:
        ac = model.asymptotic_coeffs(params)
        u_b += ac.p1 / r_eff**2
        v_b += ac.q1 / r_eff**2
    return u_b, v_b


def node_derivative(mesh: RadialMesh, values: np.ndarray) -> np.ndarray:
    """Nodal derivative, averaging the two one-sided element derivatives at vertices."""
    _, dB, _ = lagrange_tables(mesh.ref_nodes, mesh.ref_nodes)
    h = np.diff(mesh.vertices)
    loc = values[mesh.element_nodes]  # (ne, p+1)
    d = np.einsum("ej,ij->ei", loc, dB) * (2.0 / h)[:, None]
    out = np.zeros(mesh.n_nodes)
    cnt = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.element_nodes, d)
    np.add.at(cnt, mesh.element_nodes, 1.0)
    return out / cnt


@dataclass(frozen=True)
class Profile:
    mesh: RadialMesh
    params: ModelParams
    u: np.ndarray
    v: np.ndarray
    residual_norm: float = math.nan
    newton_steps: int = 0
    converged: bool = False
    du: np.ndarray = field(default=None, repr=False)
    dv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.shape != (self.mesh.n_nodes,) or v.shape != u.shape:
            raise ValueError("nodal arrays do not match the mesh")
        du = node_derivative(self.mesh, u)
        dv = node_derivative(self.mesh, v)
        for a in (u, v, du, dv):
            a.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "dv", dv)

    @property
    def r(self) -> np.ndarray:
        return self.mesh.nodes

    @property
    def constants(self) -> model.BulkConstants:
        return model.bulk_constants(self.params)

    def evaluate(self, r) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(u, u', v, v') at arbitrary radii in [0, R_eff]."""
        m = self.mesh
        return (
            m.interpolate(self.u, r),
            m.interpolate(self.u, r, 1),
            m.interpolate(self.v, r),
            m.interpolate(self.v, r, 1),
        )

    def at_quadrature(self, nq: int | None = None) -> "QuadState":
        return QuadState.from_profile(self, nq)

    def nodal_vector(self) -> np.ndarray:
        return np.column_stack([self.u, self.v]).ravel()


@dataclass(frozen=True)
class QuadState:
    """Profile data sampled at Gauss points, second derivatives taken from the ODE."""

    quad: Quadrature
    params: ModelParams
    r: np.ndarray
    u: np.ndarray
    du: np.ndarray
    v: np.ndarray
    dv: np.ndarray
    d2u: np.ndarray
    d2v: np.ndarray

    @classmethod
    def from_profile(cls, profile: Profile, nq: int | None = None) -> "QuadState":
        quad = profile.mesh.quadrature(nq)
        r = quad.r
        u, v = quad.values(profile.u), quad.values(profile.v)
        du, dv = quad.derivs(profile.u), quad.derivs(profile.v)
        h, g = model.bulk_grad(profile.params, u, v)
        k2 = profile.params.k ** 2
        d2u = h + k2 * u / r**2 - du / r
        d2v = g - dv / r
        return cls(quad, profile.params, r, u, du, v, dv, d2u, d2v)

    def integrate(self, integrand: np.ndarray) -> float:
        return self.quad.integrate(integrand)


# --------------------------------------------------------------------------- guess


def initial_guess(params: ModelParams, mesh: RadialMesh) -> Profile:
    s = model.bulk_constants(params).s_plus
    kk = abs(params.k)
    ell = 1.0 / math.sqrt(params.c2 * s * s)
    r = mesh.nodes
    R = mesh.r_eff
    u_b, v_b = boundary_values(params, R)
    shape = r**kk / (r * r + ell * ell) ** (kk / 2.0)
    u0 = u_b * shape / shape[-1]
    v0 = np.full_like(r, -s / SQRT6)
    if not params.finite:
        v0 = v0 + (v_b + s / SQRT6) * (r / R) ** 4
    u0[0] = 0.0
    v0[-1] = v_b
    return Profile(mesh, params, u0, v0)


# --------------------------------------------------------------------------- solver


class _RadialSystem:
    """Weak residual / Jacobian of the profile equations on a fixed mesh."""

    def __init__(self, params: ModelParams, mesh: RadialMesh):
        self.params = params
        self.mesh = mesh
        self.quad = mesh.quadrature()
        n = mesh.n_nodes
        free = np.ones(2 * n, dtype=bool)
        free[0] = False  # u(0)
        free[2 * (n - 1)] = False  # u(R)
        free[2 * (n - 1) + 1] = False  # v(R)
        self.free = free
        self.free_idx = np.flatnonzero(free)
        self.k2 = float(params.k**2)
        self.inv_r2 = 1.0 / self.quad.r**2

    def residual(self, x: np.ndarray, with_scale: bool = False):
        q = self.quad
        u, v = x[0::2], x[1::2]
        uq, vq = q.values(u), q.values(v)
        duq, dvq = q.derivs(u), q.derivs(v)
        h, g = model.bulk_grad(self.params, uq, vq)
        cu = self.k2 * uq * self.inv_r2 + h
        Ru = q.load(cu, duq)
        Rv = q.load(g, dvq)
        R = np.empty_like(x)
        R[0::2], R[1::2] = Ru, Rv
        if not with_scale:
            return R
        Su = _abs_load(q, np.abs(cu), np.abs(duq))
        Sv = _abs_load(q, np.abs(g), np.abs(dvq))
        S = np.empty_like(x)
        S[0::2], S[1::2] = Su, Sv
        return R, S

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        q = self.quad
        uq, vq = q.values(x[0::2]), q.values(x[1::2])
        f_pp, f_pq, f_qq = model.bulk_hessian_entries(self.params, uq, vq)
        pot = np.empty((2, 2) + uq.shape)
        pot[0, 0] = self.k2 * self.inv_r2 + f_pp
        pot[0, 1] = pot[1, 0] = f_pq
        pot[1, 1] = f_qq
        return assemble_form(q, pot)

    def scaled_norm(self, x: np.ndarray) -> float:
        R, S = self.residual(x, with_scale=True)
        f = self.free
        return float(np.max(np.abs(R[f])) / max(np.max(S[f]), 1e-300))

    def energy(self, x: np.ndarray) -> float:
        q = self.quad
        u, v = x[0::2], x[1::2]
        uq, vq = q.values(u), q.values(v)
        duq, dvq = q.derivs(u), q.derivs(v)
        dens = 0.5 * (duq**2 + dvq**2 + self.k2 * uq**2 * self.inv_r2) + model.bulk_f(self.params, uq, vq)
        return q.integrate(dens)


def _abs_load(q: Quadrature, coef: np.ndarray, dcoef: np.ndarray) -> np.ndarray:
    rw = q.rw
    loc = np.einsum("eq,qj->ej", coef * rw, np.abs(q.phi)) + np.einsum("eq,eqj->ej", dcoef * rw, np.abs(q.dphi))
    out = np.zeros(q.mesh.n_nodes)
    np.add.at(out, q.mesh.element_nodes, loc)
    return out


def _set_boundary(x: np.ndarray, params: ModelParams, mesh: RadialMesh) -> np.ndarray:
    x = x.copy()
    u_b, v_b = boundary_values(params, mesh.r_eff)
    x[0] = 0.0
    x[-2], x[-1] = u_b, v_b
    return x


def _newton(system: _RadialSystem, x: np.ndarray, tol: float, max_steps: int) -> tuple[np.ndarray, float, int, bool]:
    """Damped Newton with backtracking on the free residual norm.

    Returns (x, scaled residual, steps taken, converged).  Stops early, without
    convergence, if the line search stalls.
    """
    f = system.free_idx
    R = system.residual(x)
    merit = float(np.linalg.norm(R[f]))
    norm = system.scaled_norm(x)
    steps = 0
    polish = 0
    while steps < max_steps:
        if norm <= tol:
            # a couple of extra full steps drive the residual to round-off
            if polish >= 2:
                break
            polish += 1
        J = system.jacobian(x)[f][:, f].tocsc()
        try:
            delta = spla.spsolve(J, -R[f])
        except RuntimeError:
            return x, norm, steps, norm <= tol
        if not np.all(np.isfinite(delta)):
            return x, norm, steps, norm <= tol
        alpha = 1.0
        accepted = False
        while alpha >= 2.0**-12:
            xt = x.copy()
            xt[f] += alpha * delta
            Rt = system.residual(xt)
            mt = float(np.linalg.norm(Rt[f]))
            if mt <= (1.0 - 1e-4 * alpha) * merit or (polish and mt <= merit):
                accepted = True
                break
            alpha *= 0.5
        steps += 1
        if not accepted:
            return x, norm, steps, norm <= tol
        x, R, merit = xt, Rt, mt
        norm = system.scaled_norm(x)
    return x, norm, steps, norm <= tol


def _gradient_flow(system: _RadialSystem, x: np.ndarray, n_steps: int = 200, tau: float = 1.0) -> np.ndarray:
    """Stabilized semi-implicit descent, clipped to u >= 0, v <= 0."""
    params = system.params
    q = system.quad
    ne, nq = q.r.shape
    stab = 3.0 * model.energy_scale(params)
    lin = np.zeros((2, 2, ne, nq))
    lin[0, 0] = system.k2 * system.inv_r2 + stab + 1.0 / tau
    lin[1, 1] = stab + 1.0 / tau
    A = assemble_form(q, lin)
    mpot = np.zeros((2, 2, ne, nq))
    mpot[0, 0] = mpot[1, 1] = stab + 1.0 / tau
    Mstab = assemble_form(q, mpot, gradient=0)
    f = system.free_idx
    solve = spla.factorized(A[f][:, f].tocsc())
    for _ in range(n_steps):
        uq, vq = q.values(x[0::2]), q.values(x[1::2])
        h, g = model.bulk_grad(params, uq, vq)
        F = np.empty_like(x)
        F[0::2], F[1::2] = q.load(h), q.load(g)
        rhs = Mstab @ x - F
        rhs -= A[:, ~system.free] @ x[~system.free]
        xn = x.copy()
        xn[f] = solve(rhs[f])
        xn[0::2] = np.maximum(xn[0::2], 0.0)
        xn[1::2] = np.minimum(xn[1::2], 0.0)
        xn = _set_boundary(xn, params, system.mesh)
        if np.max(np.abs(xn - x)) < 1e-10:
            x = xn
            break
        x = xn
    return x


def _solve_stage(params: ModelParams, mesh: RadialMesh, x: np.ndarray, tol: float, max_newton: int):
    system = _RadialSystem(params, mesh)
    x = _set_boundary(x, params, mesh)
    total = 0
    for attempt in range(4):
        x, norm, steps, ok = _newton(system, x, tol, max_newton)
        total += steps
        if ok:
            return x, norm, total, True
        log.debug("Newton stalled (residual %.3e); gradient-flow fallback %d", norm, attempt)
        x = _gradient_flow(system, x)
    norm = system.scaled_norm(x)
    return x, norm, total, norm <= tol


def solve_profile(
    params: ModelParams,
    mesh: RadialMesh,
    guess: Profile | None = None,
    tol: float = NEWTON_TOL,
    max_newton: int = MAX_NEWTON,
    continuation: bool | None = None,
) -> Profile:
    """Solve the profile equations; raise NonConvergence or SignViolation on failure.

    SuperCritical targets with a2 > 0 are reached by continuation in b2 from the
    critical value (``continuation=None`` means exactly that).
    """
    if guess is None:
        guess = initial_guess(params, mesh)
    if guess.mesh.n_nodes != mesh.n_nodes:
        raise ValueError("guess lives on a different mesh")
    x = guess.nodal_vector()
    regime = model.classify(params)
    if continuation is None:
        continuation = regime is Regime.SUPERCRITICAL and params.a2 > 0
    total = 0
    if continuation:
        b2_crit = math.sqrt(3.0 * params.a2 * params.c2)
        for b2 in np.linspace(b2_crit, params.b2, CONTINUATION_STEPS + 1)[:-1]:
            stage = params.with_(b2=float(b2))
            x, norm, steps, ok = _solve_stage(stage, mesh, x, tol, max_newton)
            total += steps
            if not ok:
                raise NonConvergence(f"continuation stage b2={b2:.6g} failed (residual {norm:.3e})", x, norm)
    x, norm, steps, ok = _solve_stage(params, mesh, x, tol, max_newton)
    total += steps
    if not ok:
        raise NonConvergence(f"profile solve did not reach tol {tol:g} (residual {norm:.3e})", x, norm)
    prof = Profile(mesh, params, x[0::2], x[1::2], residual_norm=norm, newton_steps=total, converged=True)
    inner = slice(1, -1)
    if np.any(prof.u[inner] < 0.0) or np.any(prof.v[inner] > 0.0):
        raise SignViolation("converged profile leaves the cone u >= 0, v <= 0", prof)
    return prof


def solve(params: ModelParams, n_elements: int = DEFAULT_ELEMENTS, degree: int = DEFAULT_DEGREE, **mesh_kw) -> Profile:
    """Convenience: default mesh, default guess, solve."""
    mesh = build_mesh(params, n_elements=n_elements, degree=degree, **mesh_kw)
    return solve_profile(params, mesh)


def energy(profile: Profile, reference: Profile | None = None) -> float:
    """E on [0, R_eff]; with ``reference`` returns E(profile) - E(reference) (same mesh)."""
    system = _RadialSystem(profile.params, profile.mesh)
    e = system.energy(profile.nodal_vector())
    if reference is not None:
        e -= system.energy(reference.nodal_vector())
    return e


def weak_residual(profile: Profile) -> float:
    return _RadialSystem(profile.params, profile.mesh).scaled_norm(profile.nodal_vector())


def strong_residual(profile: Profile) -> np.ndarray:
    """Three-point finite-difference residual of the ODE at interior vertices.

    Returns (n_interior_vertices, 2) for the u and v equations.
    """
    p = profile.mesh.degree
    r = profile.mesh.nodes[::p]
    u, v = profile.u[::p], profile.v[::p]
    hl = r[1:-1] - r[:-2]
    hr = r[2:] - r[1:-1]
    rc = r[1:-1]

    def d1(f):
        return (hl**2 * f[2:] - hr**2 * f[:-2] + (hr**2 - hl**2) * f[1:-1]) / (hl * hr * (hl + hr))

    def d2(f):
        return 2.0 * (hl * f[2:] - (hl + hr) * f[1:-1] + hr * f[:-2]) / (hl * hr * (hl + hr))

    h, g = model.bulk_grad(profile.params, u[1:-1], v[1:-1])
    k2 = profile.params.k ** 2
    ru = d2(u) + d1(u) / rc - k2 * u[1:-1] / rc**2 - h
    rv = d2(v) + d1(v) / rc - g
    return np.column_stack([ru, rv])


# --------------------------------------------------------------------------- diagnostics


@dataclass
class DiagnosticsReport:
    regime: str
    box_bounds_ok: bool
    sign_ok: bool
    sqrt3_inequality_ok: bool
    monotonicity: str
    expected_monotonicity: str
    monotonicity_ok: bool
    max_residual: float
    min_du: float
    min_dv: float
    max_dv: float
    p1_hat: float | None = None
    q1_hat: float | None = None
    p1: float | None = None
    q1: float | None = None
    p1_rel_err: float | None = None
    q1_rel_err: float | None = None
    critical_v_constant_ok: bool | None = None
    critical_v_deviation: float | None = None

    @property
    def ok(self) -> bool:
        flags = [self.box_bounds_ok, self.sign_ok, self.sqrt3_inequality_ok, self.monotonicity_ok]
        if self.critical_v_constant_ok is not None:
            flags.append(self.critical_v_constant_ok)
        return all(flags)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["ok"] = self.ok
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


EXPECTED_MONOTONICITY = {
    Regime.SUBCRITICAL: "u up, v up",
    Regime.CRITICAL: "u up, v constant",
    Regime.SUPERCRITICAL: "u up, v down",
}


def monotonicity_verdict(du: np.ndarray, dv: np.ndarray, slack: float) -> str:
    u_part = "u up" if np.all(du > -slack) else ("u down" if np.all(du < slack) else "u mixed")
    if np.all(np.abs(dv) <= slack):
        v_part = "v constant"
    elif np.all(dv > -slack):
        v_part = "v up"
    elif np.all(dv < slack):
        v_part = "v down"
    else:
        v_part = "v mixed"
    return f"{u_part}, {v_part}"


def fit_asymptotics(profile: Profile, window: tuple[float, float] = (0.25, 0.5)) -> tuple[float, float]:
    """Least-squares p1, q1 from u - s/sqrt2 ~ p1 r^-2, v + s/sqrt6 ~ q1 r^-2 over a window of R_eff."""
    s = profile.constants.s_plus
    r = profile.r
    R = profile.mesh.r_eff
    sel = (r >= window[0] * R) & (r <= window[1] * R)
    x = r[sel] ** -2.0
    p1 = float(np.dot(x, profile.u[sel] - s / SQRT2) / np.dot(x, x))
    q1 = float(np.dot(x, profile.v[sel] + s / SQRT6) / np.dot(x, x))
    return p1, q1


def diagnose(profile: Profile, slack_factor: float = 1e-10) -> DiagnosticsReport:
    params = profile.params
    bc = profile.constants
    s = bc.s_plus
    regime = bc.regime
    inner = slice(1, -1)
    u, v = profile.u[inner], profile.v[inner]
    du, dv = profile.du[inner], profile.dv[inner]
    slack = slack_factor * s

    lo = min(-s / SQRT6, 2 * bc.s_minus / SQRT6)
    hi = max(-s / SQRT6, 2 * bc.s_minus / SQRT6)
    pad = slack if regime is Regime.CRITICAL else 0.0
    box = bool(np.all((u > 0) & (u < s / SQRT2)) and np.all((v > lo - pad) & (v < hi + pad)))
    sign_ok = bool(np.all(u > 0) and np.all(v < 0))
    sqrt3_ok = bool(np.all(SQRT3 * v + u < 0))
    verdict = monotonicity_verdict(du, dv, slack)
    expected = EXPECTED_MONOTONICITY[regime]
    rep = DiagnosticsReport(
        regime=regime.value,
        box_bounds_ok=box,
        sign_ok=sign_ok,
        sqrt3_inequality_ok=sqrt3_ok,
        monotonicity=verdict,
        expected_monotonicity=expected,
        monotonicity_ok=verdict == expected,
        max_residual=float(profile.residual_norm),
        min_du=float(du.min()),
        min_dv=float(dv.min()),
        max_dv=float(dv.max()),
    )
    if not params.finite:
        ac = model.asymptotic_coeffs(params)
        p1_hat, q1_hat = fit_asymptotics(profile)
        rep.p1_hat, rep.q1_hat, rep.p1, rep.q1 = p1_hat, q1_hat, ac.p1, ac.q1
        rep.p1_rel_err = abs(p1_hat / ac.p1 - 1.0)
        rep.q1_rel_err = abs(q1_hat / ac.q1 - 1.0) if ac.q1 != 0 else abs(q1_hat)
    if regime is Regime.CRITICAL:
        dev = float(np.max(np.abs(profile.v + s / SQRT6)))
        rep.critical_v_deviation = dev
        rep.critical_v_constant_ok = dev <= 1e-8 * s
    return rep


# --------------------------------------------------------------------------- export


def profile_to_csv(profile: Profile, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "u", "v", "du", "dv"])
    for row in zip(profile.r, profile.u, profile.v, profile.du, profile.dv):
        w.writerow([repr(float(x)) for x in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_profile_csv(path_or_text: str | Path) -> dict[str, np.ndarray]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) or "\n" not in str(path_or_text) else str(path_or_text)
    rows = list(csv.reader(io.StringIO(text)))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    return {name: data[:, i] for i, name in enumerate(header)}
