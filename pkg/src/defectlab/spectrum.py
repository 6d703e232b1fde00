"""Constrained quadratic forms and their lowest generalized eigenpairs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationFailure, NonConvergence

log = logging.getLogger(__name__)

DENSE_LIMIT = 512
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class QuadForm:
    """Stiffness/mass pair on the full interleaved dof space plus a constraint map.

    ``T`` maps free coordinates to full nodal vectors (x_full = T y).  It is a
    plain selection for Dirichlet constraints and carries the rotation for the
    m = |k| constraint on (w1 - w2).
    """

    K_full: sp.csr_matrix
    M_full: sp.csr_matrix
    T: sp.csr_matrix
    ncomp: int
    label: str
    scale: float = 1.0
    extension: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def stiffness(self) -> sp.csr_matrix:
        return self._free[0]

    @property
    def mass(self) -> sp.csr_matrix:
        return self._free[1]

    @property
    def _free(self):
        cached = self.__dict__.get("_free_cache")
        if cached is None:
            Tt = self.T.T.tocsr()
            K = (Tt @ self.K_full @ self.T).tocsr()
            M = (Tt @ self.M_full @ self.T).tocsr()
            K = 0.5 * (K + K.T)
            M = 0.5 * (M + M.T)
            cached = (K.tocsr(), M.tocsr())
            object.__setattr__(self, "_free_cache", cached)
        return cached

    @property
    def n_free(self) -> int:
        return self.T.shape[1]

    def value(self, x_full: np.ndarray) -> float:
        """Form value on a full nodal vector (constraints are not enforced here)."""
        return float(x_full @ (self.K_full @ x_full))

    def mass_value(self, x_full: np.ndarray) -> float:
        return float(x_full @ (self.M_full @ x_full))

    def expand(self, y: np.ndarray) -> np.ndarray:
        return self.T @ y

    def restrict(self, x_full: np.ndarray) -> np.ndarray:
        """Least-squares free coordinates of a full vector (exact when x_full is admissible)."""
        TtT = (self.T.T @ self.T).tocsc()
        return spla.spsolve(TtT, self.T.T @ x_full)

    def with_mass(self, M_full: sp.csr_matrix) -> "QuadForm":
        return QuadForm(self.K_full, M_full, self.T, self.ncomp, self.label, self.scale, self.extension, dict(self.meta))

    def rayleigh(self, x_full: np.ndarray) -> float:
        return self.value(x_full) / self.mass_value(x_full)


def selection_map(n_full: int, constrained: np.ndarray | list[int]) -> sp.csr_matrix:
    keep = np.ones(n_full, dtype=bool)
    keep[np.asarray(constrained, dtype=int)] = False
    cols = np.flatnonzero(keep)
    return sp.csr_matrix((np.ones(len(cols)), (cols, np.arange(len(cols)))), shape=(n_full, len(cols)))


@dataclass(frozen=True)
class SpectrumResult:
    label: str
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # full nodal vectors, columns
    residuals: np.ndarray
    shift: float
    method: str
    extension: bool = False

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
            "extension": self.extension,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def eigenvector_csv(self, ncomp: int, r: np.ndarray, index: int = 0) -> str:
        x = self.eigenvectors[:, index]
        comps = [x[c::ncomp] for c in range(ncomp)]
        head = ",".join(["r"] + [f"w{c}" for c in range(ncomp)])
        rows = [",".join(repr(float(v)) for v in vals) for vals in zip(r, *comps)]
        return "\n".join([head] + rows) + "\n"


def _bandwidth(A: sp.spmatrix) -> int:
    A = A.tocoo()
    if A.nnz == 0:
        return 0
    return int(np.max(np.abs(A.row - A.col)))


def _to_upper_banded(A: sp.spmatrix, bw: int) -> np.ndarray:
    A = A.tocoo()
    n = A.shape[0]
    ab = np.zeros((bw + 1, n))
    sel = A.col >= A.row
    ab[bw + A.row[sel] - A.col[sel], A.col[sel]] = A.data[sel]
    return ab


class BandedShiftInvert:
    """(K - sigma M)^{-1} via banded Cholesky; raises FactorizationFailure if not SPD."""

    def __init__(self, K: sp.csr_matrix, M: sp.csr_matrix, sigma: float):
        A = (K - sigma * M).tocsr()
        self.bw = max(_bandwidth(A), 0)
        self.n = A.shape[0]
        try:
            self.cb = sla.cholesky_banded(_to_upper_banded(A, self.bw), lower=False)
        except sla.LinAlgError as exc:
            raise FactorizationFailure(f"K - sigma M not positive definite at sigma={sigma:.3e}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve_banded((self.cb, False), b)

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator((self.n, self.n), matvec=self.solve, dtype=float)


def _residuals(K, M, vals, vecs) -> np.ndarray:
    out = np.empty(len(vals))
    for i, lam in enumerate(vals):
        x = vecs[:, i]
        out[i] = np.linalg.norm(K @ x - lam * (M @ x)) / np.linalg.norm(x)
    return out


def _normalize(M, vecs: np.ndarray) -> np.ndarray:
    """M-normalize and fix the sign so the largest-magnitude entry is positive."""
    out = vecs.copy()
    for i in range(out.shape[1]):
        x = out[:, i]
        x /= np.sqrt(x @ (M @ x))
        j = int(np.argmax(np.abs(x)))
        if x[j] < 0:
            x *= -1.0
    return out


def lowest_spectrum(
    form: QuadForm,
    count: int = 3,
    shift: float | None = None,
    max_retries: int = 8,
) -> SpectrumResult:
    """Smallest ``count`` eigenpairs of K x = lambda M x on the free dofs.

    Shift-invert about a shift below the spectrum (banded Cholesky of
    K - sigma M).  Failed factorizations mean the shift sits above an
    eigenvalue; the shift is lowered and retried.  Small problems go dense.
    """
    K, M = form.stiffness, form.mass
    n = K.shape[0]
    count = min(count, n)
    scale = form.scale
    if n <= DENSE_LIMIT:
        vals, vecs = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, count - 1])
        method, sigma = "dense", float("nan")
    else:
        sigma = -1e-8 * scale if shift is None else shift
        op = None
        for j in range(max_retries):
            try:
                op = BandedShiftInvert(K, M, sigma)
                break
            except FactorizationFailure:
                sigma = -0.1 * scale * 10.0**j if j < max_retries - 1 else sigma * 10
        if op is None:
            raise FactorizationFailure(f"no positive-definite shift found for {form.label}")
        v0 = np.cos(np.arange(n) * 0.7) + 1.5
        try:
            vals, vecs = spla.eigsh(
                K, k=count, M=M, sigma=sigma, which="LM", OPinv=op.as_operator(), v0=v0, tol=1e-13, maxiter=5000
            )
        except spla.ArpackNoConvergence as exc:
            raise NonConvergence(f"eigensolver did not converge for {form.label}") from exc
        method = "shift-invert"
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    vecs = _normalize(M, vecs)
    res = _residuals(K, M, vals, vecs)
    full = np.asarray(form.T @ vecs)
    return SpectrumResult(
        label=form.label,
        eigenvalues=np.asarray(vals, dtype=float),
        eigenvectors=full,
        residuals=res,
        shift=float(sigma),
        method=method,
        extension=form.extension,
    )
