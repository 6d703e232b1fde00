"""Radial second variation B, its Hardy rewrite, and the multi-start uniqueness probe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import NonConvergence, SignViolation
from .fem import assemble_form, mass_matrix
from .model import SQRT6, ModelParams
from .radial import Profile, QuadState, initial_guess, solve_profile
from .spectrum import QuadForm, selection_map

log = logging.getLogger(__name__)

CLUSTER_RTOL = 1e-6


def _require_converged(profile: Profile) -> None:
    if not profile.converged:
        raise ValueError("profile is not a converged solution")


def b_potential(params: ModelParams, r, u, v) -> np.ndarray:
    """(2, 2, ...) potential matrix of B in the (xi, eta) ordering."""
    f_pp, f_pq, f_qq = model.bulk_hessian_entries(params, u, v)
    pot = np.empty((2, 2) + np.shape(u))
    pot[0, 0] = params.k**2 / r**2 + f_pp
    pot[0, 1] = pot[1, 0] = f_pq
    pot[1, 1] = f_qq
    return pot


def assemble_B(profile: Profile, mass: str = "l2") -> QuadForm:
    """B on (xi, eta): xi pinned at r = 0, both pinned at R_eff.

    ``mass="l2"`` pairs with L^2(r dr); ``mass="weighted"`` adds 1/r^2 on xi,
    the natural pairing of the energy space.
    """
    _require_converged(profile)
    st = QuadState.from_profile(profile)
    pot = b_potential(profile.params, st.r, st.u, st.v)
    K = assemble_form(st.quad, pot)
    if mass == "l2":
        M = mass_matrix(st.quad, 2)
    elif mass == "weighted":
        M = mass_matrix(st.quad, 2, np.stack([1.0 + 1.0 / st.r**2, np.ones_like(st.r)]))
    else:
        raise ValueError(f"unknown mass {mass!r}")
    n = profile.mesh.n_nodes
    T = selection_map(2 * n, [0, 2 * (n - 1), 2 * (n - 1) + 1])
    return QuadForm(K, M, T, 2, "B", scale=model.energy_scale(profile.params))


def _check_compact(*samples: np.ndarray) -> None:
    for s in samples:
        s = np.asarray(s)
        if np.any(s[:2] != 0.0) or np.any(s[-2:] != 0.0):
            raise ValueError("samples must vanish at the first and last two nodes")


def b_density(params: ModelParams, r, u, v, xi, dxi, eta, deta) -> np.ndarray:
    """Integrand of B (without the r weight)."""
    pot = b_potential(params, r, u, v)
    return dxi**2 + deta**2 + pot[0, 0] * xi**2 + 2 * pot[0, 1] * xi * eta + pot[1, 1] * eta**2


def hardy_certificate_B(profile: Profile, xi_t: np.ndarray, eta_t: np.ndarray, nq: int | None = None) -> tuple[float, float]:
    """(B(u xi_t, v eta_t), its integrated-by-parts sum-of-squares form).

    ``xi_t``, ``eta_t`` are nodal samples on the profile mesh.
    """
    _check_compact(xi_t, eta_t)
    p = profile.params
    st = QuadState.from_profile(profile, nq or 2 * profile.mesh.degree + 4)
    q = st.quad
    a, da = q.values(np.asarray(xi_t, float)), q.derivs(np.asarray(xi_t, float))
    c, dc = q.values(np.asarray(eta_t, float)), q.derivs(np.asarray(eta_t, float))
    u, du, v, dv = st.u, st.du, st.v, st.dv
    xi, dxi = u * a, du * a + u * da
    eta, deta = v * c, dv * c + v * dc
    direct = q.integrate(b_density(p, st.r, u, v, xi, dxi, eta, deta))
    b2, c2 = p.b2, p.c2
    rewritten = q.integrate(
        u**2 * da**2
        + v**2 * dc**2
        + (-b2 * (v**2 + u**2) / (v * SQRT6) + 2 * c2 * v**2) * eta**2
        + 2 * c2 * u**2 * xi**2
        + 4 * u * xi * eta * (b2 / SQRT6 + c2 * v)
    )
    return direct, rewritten


# --------------------------------------------------------------------------- uniqueness


@dataclass
class UniquenessResult:
    distinct_count: int
    max_pairwise_deviation: float
    n_converged: int
    failures: list[str] = field(default_factory=list)
    cluster_sizes: list[int] = field(default_factory=list)
    cluster_tol: float = math.nan

    def to_dict(self) -> dict:
        return {
            "distinct_count": self.distinct_count,
            "max_pairwise_deviation": self.max_pairwise_deviation,
            "n_converged": self.n_converged,
            "failures": list(self.failures),
            "cluster_sizes": list(self.cluster_sizes),
            "cluster_tol": self.cluster_tol,
        }


def start_seeds(seed, n_starts: int) -> list[np.random.SeedSequence]:
    """One seed sequence per start; an explicit list gives the starts verbatim."""
    if isinstance(seed, (list, tuple)):
        if len(seed) != n_starts:
            raise ValueError("seed list length must equal n_starts")
        return [np.random.SeedSequence(int(s)) for s in seed]
    return np.random.SeedSequence(seed).spawn(n_starts)


def randomized_guess(params: ModelParams, mesh, ss: np.random.SeedSequence, n_bumps: int = 4) -> Profile:
    """initial_guess plus random radial bumps, clipped to the cone u >= 0, v <= 0."""
    rng = np.random.default_rng(ss)
    base = initial_guess(params, mesh)
    s = model.bulk_constants(params).s_plus
    r = mesh.nodes
    R = mesh.r_eff
    envelope = np.sin(np.pi * r / R)
    u, v = base.u.copy(), base.v.copy()
    for target, scale in ((u, s / math.sqrt(2.0)), (v, s / SQRT6)):
        for _ in range(n_bumps):
            c = rng.uniform(0.05, 0.95) * R
            w = rng.uniform(0.03, 0.25) * R
            amp = rng.uniform(-0.6, 0.6) * scale
            target += amp * envelope * np.exp(-0.5 * ((r - c) / w) ** 2)
    u = np.maximum(u, 0.0)
    v = np.minimum(v, 0.0)
    u[0] = 0.0
    u[-1], v[-1] = base.u[-1], base.v[-1]
    return Profile(mesh, params, u, v)


def cluster_profiles(profiles: list[Profile], tol: float) -> list[list[int]]:
    """Greedy single-link clustering by sup-norm distance of (u, v)."""
    clusters: list[list[int]] = []
    for i, p in enumerate(profiles):
        for cl in clusters:
            if any(_sup_dist(p, profiles[j]) <= tol for j in cl):
                cl.append(i)
                break
        else:
            clusters.append([i])
    return clusters


def _sup_dist(p: Profile, q: Profile) -> float:
    return float(max(np.max(np.abs(p.u - q.u)), np.max(np.abs(p.v - q.v))))


def uniqueness_probe(params: ModelParams, mesh, n_starts: int = 8, seed=0) -> UniquenessResult:
    if n_starts < 2:
        raise ValueError("n_starts must be >= 2")
    s = model.bulk_constants(params).s_plus
    profiles: list[Profile] = []
    failures: list[str] = []
    for i, ss in enumerate(start_seeds(seed, n_starts)):
        guess = randomized_guess(params, mesh, ss)
        try:
            profiles.append(solve_profile(params, mesh, guess))
        except (NonConvergence, SignViolation) as exc:
            log.info("start %d failed: %s", i, exc)
            failures.append(f"start {i}: {type(exc).__name__}: {exc}")
    tol = CLUSTER_RTOL * s
    if not profiles:
        return UniquenessResult(0, math.nan, 0, failures, [], tol)
    clusters = sorted(cluster_profiles(profiles, tol), key=len, reverse=True)
    main = clusters[0]
    dev = 0.0
    for a in range(len(main)):
        for b in range(a + 1, len(main)):
            dev = max(dev, _sup_dist(profiles[main[a]], profiles[main[b]]))
    return UniquenessResult(len(clusters), dev, len(profiles), failures, [len(c) for c in clusters], tol)
