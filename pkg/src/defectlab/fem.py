"""Radial finite elements with weight r.

Elements are Lagrange polynomials of degree ``p`` on Gauss-Lobatto nodes.  A
multi-component field is stored interleaved: global dof ``node * ncomp + c``.
Every quadratic form in the package has the shape

    Q(w) = sum_c  int (w_c')^2 r dr  +  sum_{c,d} int V_cd(r) w_c w_d r dr

so one assembler serves the Newton Jacobian, the radial second variation and
all Fourier-mode forms.  Integrals only touch interior Gauss points, which keeps
the 1/r^2 terms finite on the first element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre


@dataclass(frozen=True)
class Grading:
    """Element-size law toward r = 0.

    ``kind="geometric"`` makes consecutive element sizes grow by ``ratio``
    going outward; ``"uniform"`` ignores ``ratio``.
    """

    kind: str = "uniform"
    ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in {"uniform", "geometric"}:
            raise ValueError(f"unknown grading kind {self.kind!r}")
        if not self.ratio > 0:
            raise ValueError(f"grading ratio must be positive, got {self.ratio}")

    @classmethod
    def stretched(cls, n_elements: int, total: float) -> "Grading":
        """Geometric grading whose last/first element size ratio is ``total``."""
        if n_elements < 2 or total == 1.0:
            return cls("uniform", 1.0)
        return cls("geometric", total ** (1.0 / (n_elements - 1)))

    def describe(self) -> dict:
        return {"kind": self.kind, "ratio": self.ratio}


def graded_vertices(r_eff: float, n_elements: int, grading: Grading) -> np.ndarray:
    if n_elements < 1:
        raise ValueError("need at least one element")
    if grading.kind == "uniform" or grading.ratio == 1.0:
        x = np.linspace(0.0, r_eff, n_elements + 1)
    else:
        sizes = grading.ratio ** np.arange(n_elements, dtype=float)
        x = np.concatenate([[0.0], np.cumsum(sizes)])
        x *= r_eff / x[-1]
    x[0] = 0.0
    x[-1] = r_eff
    return x


def lobatto_points(p: int) -> np.ndarray:
    """Gauss-Lobatto-Legendre nodes on [-1, 1]."""
    if p == 1:
        return np.array([-1.0, 1.0])
    dP = legendre.Legendre.basis(p).deriv()
    inner = np.sort(dP.roots().real)
    return np.concatenate([[-1.0], inner, [1.0]])


def lagrange_tables(nodes: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values, first and second derivatives of the Lagrange basis on ``nodes`` at ``x``.

    Returns arrays shaped (len(x), len(nodes)).
    """
    n = len(nodes)
    V = np.vander(nodes, n, increasing=True)
    coeffs = np.linalg.inv(V)  # column j: monomial coefficients of basis j
    X = np.vander(np.atleast_1d(x), n, increasing=True)
    powers = np.arange(n)
    dX = np.zeros_like(X)
    dX[:, 1:] = X[:, :-1] * powers[1:]
    d2X = np.zeros_like(X)
    d2X[:, 2:] = X[:, :-2] * (powers[2:] * (powers[2:] - 1))
    return X @ coeffs, dX @ coeffs, d2X @ coeffs


@dataclass(frozen=True)
class RadialMesh:
    """Elements on [0, r_eff]; ``nodes`` lists every Lagrange node, vertices included."""

    vertices: np.ndarray
    degree: int
    grading: Grading = field(default_factory=Grading)

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 1 or len(v) < 2:
            raise ValueError("mesh needs at least two vertices")
        if v[0] != 0.0 or np.any(np.diff(v) <= 0):
            raise ValueError("vertices must start at 0 and increase strictly")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def r_eff(self) -> float:
        return float(self.vertices[-1])

    @property
    def n_elements(self) -> int:
        return len(self.vertices) - 1

    @property
    def n_nodes(self) -> int:
        return self.n_elements * self.degree + 1

    @cached_property
    def ref_nodes(self) -> np.ndarray:
        return lobatto_points(self.degree)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """(n_elements, degree+1) global node indices."""
        p = self.degree
        return np.arange(self.n_elements)[:, None] * p + np.arange(p + 1)[None, :]

    @cached_property
    def nodes(self) -> np.ndarray:
        a = self.vertices[:-1, None]
        h = np.diff(self.vertices)[:, None]
        pts = a + 0.5 * h * (self.ref_nodes[None, :] + 1.0)
        out = np.empty(self.n_nodes)
        out[self.element_nodes] = pts
        out[self.element_nodes[:, 0]] = self.vertices[:-1]
        out[-1] = self.vertices[-1]
        out.setflags(write=False)
        return out

    def quadrature(self, nq: int | None = None) -> "Quadrature":
        return _quadrature(self, nq if nq is not None else self.degree + 3)

    def locate(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Element index and reference coordinate for each radius in ``r``."""
        r = np.asarray(r, dtype=float)
        e = np.searchsorted(self.vertices, r, side="right") - 1
        e = np.clip(e, 0, self.n_elements - 1)
        a = self.vertices[e]
        h = self.vertices[e + 1] - a
        xi = 2.0 * (r - a) / h - 1.0
        return e, xi

    def interpolate(self, values: np.ndarray, r: np.ndarray, derivative: int = 0) -> np.ndarray:
        """Evaluate the FE function with nodal ``values`` (last axis = nodes) at radii ``r``."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        e, xi = self.locate(r)
        out = np.empty(np.shape(values)[:-1] + r.shape)
        values = np.asarray(values)
        h = np.diff(self.vertices)
        B0, B1, B2 = lagrange_tables(self.ref_nodes, xi)
        B = (B0, B1 * (2.0 / h[e])[:, None], B2 * ((2.0 / h[e]) ** 2)[:, None])[derivative]
        local = values[..., self.element_nodes[e]]  # (..., len(r), p+1)
        out[...] = np.einsum("...ij,ij->...i", local, B)
        return out


class Quadrature:
    """Gauss-Legendre points per element with basis tables.

    ``r``, ``w`` are (n_elements, nq); ``w`` already includes the Jacobian but
    not the radial weight.
    """

    def __init__(self, mesh: RadialMesh, nq: int):
        self.mesh = mesh
        self.nq = nq
        xg, wg = legendre.leggauss(nq)
        h = np.diff(mesh.vertices)
        a = mesh.vertices[:-1]
        self.r = a[:, None] + 0.5 * h[:, None] * (xg[None, :] + 1.0)
        self.w = 0.5 * h[:, None] * wg[None, :]
        phi, dphi, d2phi = lagrange_tables(mesh.ref_nodes, xg)
        self.phi = phi  # (nq, p+1)
        self.dphi = dphi[None, :, :] * (2.0 / h)[:, None, None]  # (ne, nq, p+1)
        self.d2phi = d2phi[None, :, :] * ((2.0 / h) ** 2)[:, None, None]

    @property
    def rw(self) -> np.ndarray:
        return self.r * self.w

    def values(self, nodal: np.ndarray) -> np.ndarray:
        """Field values at quadrature points; ``nodal`` has nodes on its last axis."""
        loc = nodal[..., self.mesh.element_nodes]
        return np.einsum("...ej,qj->...eq", loc, self.phi)

    def derivs(self, nodal: np.ndarray) -> np.ndarray:
        loc = nodal[..., self.mesh.element_nodes]
        return np.einsum("...ej,eqj->...eq", loc, self.dphi)

    def second_derivs(self, nodal: np.ndarray) -> np.ndarray:
        loc = nodal[..., self.mesh.element_nodes]
        return np.einsum("...ej,eqj->...eq", loc, self.d2phi)

    def integrate(self, integrand: np.ndarray) -> float:
        """int integrand * r dr, integrand sampled at quadrature points."""
        return float(np.sum(integrand * self.rw))

    def load(self, coef: np.ndarray, dcoef: np.ndarray | None = None) -> np.ndarray:
        """Nodal vector of int (coef phi_i + dcoef phi_i') r dr."""
        rw = self.rw
        loc = np.einsum("eq,qj->ej", coef * rw, self.phi)
        if dcoef is not None:
            loc += np.einsum("eq,eqj->ej", dcoef * rw, self.dphi)
        out = np.zeros(self.mesh.n_nodes)
        np.add.at(out, self.mesh.element_nodes, loc)
        return out


_QUAD_CACHE: dict[tuple[int, int], Quadrature] = {}


def _quadrature(mesh: RadialMesh, nq: int) -> Quadrature:
    key = (id(mesh), nq)
    q = _QUAD_CACHE.get(key)
    if q is None or q.mesh is not mesh:
        if len(_QUAD_CACHE) > 64:
            _QUAD_CACHE.clear()
        q = Quadrature(mesh, nq)
        _QUAD_CACHE[key] = q
    return q


def assemble_form(
    quad: Quadrature,
    potential: np.ndarray,
    gradient: np.ndarray | None = None,
) -> sp.csr_matrix:
    """Assemble the symmetric matrix of a multi-component radial quadratic form.

    ``potential`` is (nc, nc, ne, nq), symmetric in its first two axes;
    ``gradient`` is (nc, ne, nq) or None for unit coefficient on every (w_c')^2.
    Pass ``gradient=0`` to get a pure mass-type matrix.
    """
    mesh = quad.mesh
    nc = potential.shape[0]
    rw = quad.rw
    npe = mesh.degree + 1
    # (ne, i, c, j, d)
    local = np.einsum("cdeq,qi,qj,eq->eicjd", potential, quad.phi, quad.phi, rw)
    if gradient is None:
        gradient = np.ones((nc,) + rw.shape)
    if np.ndim(gradient) > 0:
        stiff = np.einsum("ceq,eqi,eqj,eq->ecij", gradient, quad.dphi, quad.dphi, rw)
        for c in range(nc):
            local[:, :, c, :, c] += stiff[:, c]
    local = local.reshape(mesh.n_elements, npe * nc, npe * nc)
    dofs = (mesh.element_nodes[:, :, None] * nc + np.arange(nc)[None, None, :]).reshape(mesh.n_elements, -1)
    rows = np.repeat(dofs, npe * nc, axis=1).ravel()
    cols = np.tile(dofs, (1, npe * nc)).ravel()
    n = mesh.n_nodes * nc
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def mass_matrix(quad: Quadrature, ncomp: int, weight: np.ndarray | None = None) -> sp.csr_matrix:
    """L^2(r dr) pairing for ``ncomp`` components, optionally with per-component weights (nc, ne, nq)."""
    ne, nq = quad.r.shape
    pot = np.zeros((ncomp, ncomp, ne, nq))
    for c in range(ncomp):
        pot[c, c] = 1.0 if weight is None else weight[c]
    return assemble_form(quad, pot, gradient=0)


def interleave(*fields: np.ndarray) -> np.ndarray:
    return np.stack(fields, axis=-1).reshape(*fields[0].shape[:-1], -1)


def deinterleave(x: np.ndarray, ncomp: int) -> list[np.ndarray]:
    return [x[..., c::ncomp] for c in range(ncomp)]
