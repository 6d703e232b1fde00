"""Full tensor-field cross-checks on a polar grid.

The radial profile is lifted to the 3x3 Q-tensor field, perturbations are
stored as five moving-frame components w0..w4, and the second variation is
integrated directly (Gauss in r on the profile mesh, trapezoid in phi) so it
can be compared term by term against the sum of the azimuthal mode forms.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .model import SQRT2, ModelParams
from .modes import pm_density, v2_potential
from .radial import Profile, QuadState

I3 = np.eye(3)
E3 = np.array([0.0, 0.0, 1.0])


def frame_vectors(k: int, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Director n(phi) and its in-plane normal m(phi), shaped (len(phi), 3)."""
    half = 0.5 * k * np.asarray(phi)
    z = np.zeros_like(half)
    n = np.stack([np.cos(half), np.sin(half), z], axis=-1)
    m = np.stack([-np.sin(half), np.cos(half), z], axis=-1)
    return n, m


def basis(k: int, phi: np.ndarray) -> np.ndarray:
    """Orthonormal moving basis E0..E4, shaped (len(phi), 5, 3, 3)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    n, m = frame_vectors(k, phi)
    I2 = np.diag([1.0, 1.0, 0.0])
    out = np.zeros((len(phi), 5, 3, 3))
    out[:, 0] = math.sqrt(1.5) * (np.outer(E3, E3) - I3 / 3.0)
    out[:, 1] = SQRT2 * (np.einsum("pi,pj->pij", n, n) - 0.5 * I2)
    out[:, 2] = (np.einsum("pi,pj->pij", n, m) + np.einsum("pi,pj->pij", m, n)) / SQRT2
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    out[:, 3] = (np.outer(e1, E3) + np.outer(E3, e1)) / SQRT2
    out[:, 4] = (np.outer(e2, E3) + np.outer(E3, e2)) / SQRT2
    return out


def phi_grid(n_phi: int) -> np.ndarray:
    if n_phi < 8 or n_phi % 2:
        raise ValueError("n_phi must be even and >= 8")
    return 2.0 * np.pi * np.arange(n_phi) / n_phi


@dataclass(frozen=True)
class QTensorField:
    """3x3 matrices on an (r, phi) grid."""

    r: np.ndarray
    phi: np.ndarray
    k: int
    matrices: np.ndarray  # (n_r, n_phi, 3, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.r), len(self.phi)

    def components(self) -> np.ndarray:
        """Moving-frame components q0..q4, shaped (5, n_r, n_phi)."""
        E = basis(self.k, self.phi)
        return np.einsum("rpij,plij->lrp", self.matrices, E)

    def trace_max(self) -> float:
        return float(np.max(np.abs(np.trace(self.matrices, axis1=-2, axis2=-1))))

    def to_vtk_text(self) -> str:
        """Legacy-VTK structured grid with the six independent entries as point data."""
        nr, nphi = self.shape
        R, P = np.meshgrid(self.r, self.phi, indexing="ij")
        buf = io.StringIO()
        buf.write("# vtk DataFile Version 3.0\nQ tensor field\nASCII\nDATASET STRUCTURED_GRID\n")
        buf.write(f"DIMENSIONS {nphi} {nr} 1\nPOINTS {nr * nphi} double\n")
        for x, y in zip((R * np.cos(P)).ravel(), (R * np.sin(P)).ravel()):
            buf.write(f"{x!r} {y!r} 0\n")
        buf.write(f"POINT_DATA {nr * nphi}\n")
        for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)):
            buf.write(f"SCALARS Q{i}{j} double 1\nLOOKUP_TABLE default\n")
            for val in self.matrices[..., i, j].ravel():
                buf.write(f"{float(val)!r}\n")
        return buf.getvalue()


def radial_tensor(k: int, phi: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """u E1 + v E0 for radial samples u, v (any leading shape) times phi grid."""
    E = basis(k, phi)
    u = np.asarray(u)[..., None, None, None]
    v = np.asarray(v)[..., None, None, None]
    return u * E[:, 1] + v * E[:, 0]


def reconstruct_Q(profile: Profile, n_phi: int, r: np.ndarray | None = None) -> QTensorField:
    """Lift the profile to Q = u sqrt2 (n n - I2/2) + v sqrt(3/2)(e3 e3 - I3/3)."""
    phi = phi_grid(n_phi)
    if r is None:
        r = np.asarray(profile.r)
        u, v = np.asarray(profile.u), np.asarray(profile.v)
    else:
        r = np.asarray(r, dtype=float)
        u = profile.mesh.interpolate(profile.u, r)
        v = profile.mesh.interpolate(profile.v, r)
    return QTensorField(r, phi, profile.params.k, radial_tensor(profile.params.k, phi, u, v))


def constant_field(r: np.ndarray, n_phi: int, k: int, Q0: np.ndarray) -> QTensorField:
    phi = phi_grid(n_phi)
    mats = np.broadcast_to(np.asarray(Q0, float), (len(r), len(phi), 3, 3)).copy()
    return QTensorField(np.asarray(r, float), phi, k, mats)


def el_operator_bulk(Q: np.ndarray, params: ModelParams) -> np.ndarray:
    """a2 Q + b2 (Q^2 - |Q|^2 I/3) - c2 |Q|^2 Q, batched over leading axes."""
    Q2 = Q @ Q
    nrm = np.einsum("...ij,...ij->...", Q, Q)[..., None, None]
    return params.a2 * Q + params.b2 * (Q2 - nrm * I3 / 3.0) - params.c2 * nrm * Q


def el_residual(qfield: QTensorField, params: ModelParams) -> float:
    """Max Frobenius norm of the Euler-Lagrange residual at interior grid points.

    Polar Laplacian by second-order differences: nonuniform three-point
    stencils in r, periodic central differences in phi.
    """
    r, Q = qfield.r, qfield.matrices
    if len(r) < 3:
        raise ValueError("need at least three radii")
    dphi = 2.0 * np.pi / len(qfield.phi)
    hl = (r[1:-1] - r[:-2])[:, None, None, None]
    hr = (r[2:] - r[1:-1])[:, None, None, None]
    rc = r[1:-1][:, None, None, None]
    Qm, Qc, Qp = Q[:-2], Q[1:-1], Q[2:]
    Qrr = 2.0 * (hl * Qp - (hl + hr) * Qc + hr * Qm) / (hl * hr * (hl + hr))
    Qr = (hl**2 * Qp - hr**2 * Qm + (hr**2 - hl**2) * Qc) / (hl * hr * (hl + hr))
    Qpp = (np.roll(Qc, -1, axis=1) - 2.0 * Qc + np.roll(Qc, 1, axis=1)) / dphi**2
    inner = rc[:, 0, 0, 0] > 0
    lap = Qrr + Qr / rc + Qpp / rc**2
    res = lap + el_operator_bulk(Qc, params)
    norms = np.sqrt(np.einsum("...ij,...ij->...", res, res))[inner]
    return float(norms.max()) if norms.size else 0.0


# --------------------------------------------------------------------------- perturbations


@dataclass(frozen=True)
class PerturbationField:
    """Moving-frame components w0..w4 given as nodal values on a radial mesh times a phi grid.

    ``w`` has shape (5, n_nodes, n_phi).  The radial dependence is the finite
    element interpolant; the azimuthal dependence is trigonometric.
    """

    mesh: object
    phi: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.shape != (5, self.mesh.n_nodes, len(self.phi)):
            raise ValueError("w must be shaped (5, n_nodes, n_phi)")
        if np.any(w[:, -1, :] != 0.0):
            raise ValueError("perturbation must vanish on the outer ring")
        object.__setattr__(self, "w", w)

    @property
    def n_phi(self) -> int:
        return len(self.phi)

    def coefficients(self) -> np.ndarray:
        """Complex Fourier coefficients c[l, node, m] with w = sum_m c e^{i m phi}."""
        return np.fft.fft(self.w, axis=-1) / self.n_phi

    def band_limit(self, rtol: float = 1e-12) -> int:
        c = np.abs(self.coefficients())
        amp = c.max(axis=(0, 1))
        if amp.max() == 0.0:
            return 0
        modes = np.fft.fftfreq(self.n_phi, 1.0 / self.n_phi).astype(int)
        return int(np.max(np.abs(modes[amp > rtol * amp.max()])))

    def project(self, sector: str) -> "PerturbationField":
        keep = (0, 1, 2) if sector == "V1" else (3, 4)
        w = np.zeros_like(self.w)
        w[list(keep)] = self.w[list(keep)]
        return PerturbationField(self.mesh, self.phi, w)

    def to_csv(self) -> str:
        r = self.mesh.nodes
        buf = io.StringIO()
        buf.write("r,phi,w0,w1,w2,w3,w4\n")
        for i, ri in enumerate(r):
            for j, pj in enumerate(self.phi):
                vals = [ri, pj] + list(self.w[:, i, j])
                buf.write(",".join(repr(float(x)) for x in vals) + "\n")
        return buf.getvalue()


def perturbation_from_modes(mesh, n_phi: int, coeffs: dict[tuple[int, int], np.ndarray]) -> PerturbationField:
    """Build w_l = sum 2 Re(c e^{i m phi}) for m > 0 (c real part only for m = 0).

    ``coeffs[(l, m)]`` holds complex nodal radial profiles.
    """
    phi = phi_grid(n_phi)
    w = np.zeros((5, mesh.n_nodes, n_phi))
    for (l, m), c in coeffs.items():
        c = np.asarray(c, dtype=complex)
        if m == 0:
            w[l] += np.real(c)[:, None] * np.ones(n_phi)[None, :]
        else:
            w[l] += 2.0 * np.real(c[:, None] * np.exp(1j * m * phi)[None, :])
    return PerturbationField(mesh, phi, w)


def check_band_limit(pfield: PerturbationField, k: int) -> int:
    M = pfield.band_limit()
    limit = pfield.n_phi // 2 - 2 * abs(k)
    if M > limit:
        raise ValueError(f"band limit {M} exceeds {limit} for n_phi={pfield.n_phi}, k={k}: aliasing")
    return M


def _phi_derivative(w: np.ndarray) -> np.ndarray:
    n = w.shape[-1]
    ik = 1j * np.fft.fftfreq(n, 1.0 / n)
    ik[n // 2] = 0.0  # Nyquist mode has no real derivative
    return np.real(np.fft.ifft(ik * np.fft.fft(w, axis=-1), axis=-1))


def _field_at_quadrature(st: QuadState, w: np.ndarray):
    """Values and r-derivatives at quadrature points: (5, n_phi, ne, nq)."""
    wt = np.moveaxis(w, 1, -1)  # (5, n_phi, n_nodes)
    return st.quad.values(wt), st.quad.derivs(wt)


def L_density(profile: Profile, pfield: PerturbationField, nq: int | None = None):
    """Pointwise integrand of the second variation at (quadrature radius, phi)."""
    params = profile.params
    k = params.k
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    W, dW = _field_at_quadrature(st, pfield.w)
    Wphi = st.quad.values(np.moveaxis(_phi_derivative(pfield.w), 1, -1))  # (5, n_phi, ne, nq)
    r = st.r[None]
    grad = np.sum(dW**2, axis=0) + (
        Wphi[0] ** 2 + (Wphi[1] - k * W[2]) ** 2 + (Wphi[2] + k * W[1]) ** 2 + Wphi[3] ** 2 + Wphi[4] ** 2
    ) / r**2
    E = basis(k, pfield.phi)  # (n_phi, 5, 3, 3)
    # matrices flattened to 9-vectors so every contraction is a matmul
    Ef = E.reshape(E.shape[0], 5, 9)
    P = np.matmul(np.moveaxis(W, 0, -1), Ef[:, None]).reshape(W.shape[1:] + (3, 3))
    Q = st.u[None, ..., None, None] * E[:, 1][:, None, None] + st.v[None, ..., None, None] * E[:, 0][:, None, None]
    P2 = np.sum(P * P, axis=(-2, -1))
    Q2 = np.sum(Q * Q, axis=(-2, -1))
    QP = np.sum(Q * P, axis=(-2, -1))
    trP2Q = np.sum(np.matmul(P, P) * Q, axis=(-2, -1))
    bulk = -params.a2 * P2 - 2.0 * params.b2 * trP2Q + params.c2 * (Q2 * P2 + 2.0 * QP**2)
    return st, grad + bulk


def L_direct(profile: Profile, pfield: PerturbationField, nq: int | None = None) -> float:
    """Second variation by direct quadrature (Gauss in r, trapezoid in phi)."""
    check_band_limit(pfield, profile.params.k)
    st, dens = L_density(profile, pfield, nq)
    dphi = 2.0 * np.pi / pfield.n_phi
    # fixed reduction order: phi first, then the radial quadrature
    ring = np.sum(dens, axis=0) * dphi
    return float(np.sum(ring * st.quad.rw))


def _sign(x: int) -> float:
    return 1.0 if x >= 0 else -1.0


@dataclass(frozen=True)
class ModeSumResult:
    direct: float
    via_modes: float
    terms: dict

    @property
    def discrepancy(self) -> float:
        return abs(self.direct - self.via_modes) / (1.0 + abs(self.direct))


def mode_sum_check(profile: Profile, pfield: PerturbationField, nq: int | None = None) -> ModeSumResult:
    """Compare L_direct with 2 pi times the sum of per-mode forms."""
    params = profile.params
    k = params.k
    M = check_band_limit(pfield, k)
    direct = L_direct(profile, pfield, nq)
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    c = pfield.coefficients()  # (5, n_nodes, n_phi)
    n_phi = pfield.n_phi
    freqs = np.fft.fftfreq(n_phi, 1.0 / n_phi).astype(int)
    idx = {int(f): i for i, f in enumerate(freqs)}
    q = st.quad
    r, u, v = st.r, st.u, st.v
    sk = _sign(k)
    # modes at round-off level are not reported as terms
    floor = 1e-13 * max(float(np.abs(c).max()), 1e-300)

    def pm(m, comps):
        vals = [q.values(x) for x in comps]
        ders = [q.derivs(x) for x in comps]
        return st.integrate(pm_density(params, abs(m), r, u, v, vals, ders))

    terms: dict[str, float] = {}
    total = 0.0
    for m in range(-M, M + 1):
        cm = c[:, :, idx[m]]
        if np.abs(cm[:3]).max() <= floor:
            continue
        w, wh = cm.real, cm.imag
        sm = _sign(m)
        val = pm(m, [sm * w[0], sm * w[1], sk * wh[2]]) + pm(m, [sm * wh[0], sm * wh[1], -sk * w[2]])
        terms[f"V1:{m}"] = val
        total += val

    # complex field w3 + i w4 = sum_n xi_n e^{i n phi}
    xi = np.fft.fft(pfield.w[3] + 1j * pfield.w[4], axis=-1) / n_phi
    zero = np.zeros(xi.shape[0], dtype=complex)
    done = set()
    for n in range(-M, M + 1):
        j = k - n
        key = (min(n, j), max(n, j))
        if key in done:
            continue
        done.add(key)
        a = xi[:, idx[n]]
        b = xi[:, idx[j]] if abs(j) <= M else zero
        if max(np.abs(a).max(), np.abs(b).max()) <= floor:
            continue
        pot = v2_potential(params, n, r, u, v)

        def pair(x, y):
            X, dX = q.values(x), q.derivs(x)
            Y, dY = q.values(y), q.derivs(y)
            return st.integrate(dX**2 + dY**2 + pot[0, 0] * X * X + 2 * pot[0, 1] * X * Y + pot[1, 1] * Y * Y)

        if n == j:
            val = pair(a.real, a.imag)
        else:
            val = pair(a.real, b.real) + pair(a.imag, -b.imag)
        terms[f"V2:{key[0]},{key[1]}"] = val
        total += val
    return ModeSumResult(direct=direct, via_modes=2.0 * np.pi * total, terms=terms)


def random_band_limited(profile: Profile, n_phi: int, M: int, rng: np.random.Generator, n_bumps: int = 2) -> PerturbationField:
    """Random perturbation with modes |m| <= M, smooth compact radial bumps inside the mesh."""
    r = profile.mesh.nodes
    R = profile.mesh.r_eff
    coeffs = {}
    for l in range(5):
        for m in range(0, M + 1):
            prof = np.zeros(len(r), dtype=complex)
            for _ in range(n_bumps):
                c = rng.uniform(0.15, 0.75) * R
                w = rng.uniform(0.08, 0.2) * R
                x = (r - c) / w
                bump = np.zeros_like(r)
                s = np.abs(x) < 1
                bump[s] = np.exp(-1.0 / (1.0 - x[s] ** 2))
                amp = rng.normal() + (1j * rng.normal() if m > 0 else 0.0)
                prof += amp * bump
            coeffs[(l, m)] = prof
    return perturbation_from_modes(profile.mesh, n_phi, coeffs)
