from __future__ import annotations

import math

import numpy as np
import pytest

from defectlab import model, modes, radial, stability
from defectlab.model import FiniteDisk
from defectlab.spectrum import lowest_spectrum

from conftest import CRIT, SUB, solved
from oracles import random_smooth, smooth_bump

SQ6 = math.sqrt(6.0)


def fine_b_value(profile, xi, eta, refine=10):
    """Composite Simpson rule of the B integrand with ``2 * refine`` panels per element.

    The potential is written out from the bulk density by hand, independent of the package.
    Sub-points are nudged off the element ends so each sample sees one polynomial piece.
    """
    p = profile.params
    m = profile.mesh
    n = 2 * refine
    t = np.linspace(0.0, 1.0, n + 1)
    t[0], t[-1] = 1e-12, 1.0 - 1e-12
    a, h = m.vertices[:-1, None], np.diff(m.vertices)[:, None]
    r = (a + h * t[None, :]).ravel()
    u, du, v, dv = profile.evaluate(r)
    x, dx = m.interpolate(xi, r), m.interpolate(xi, r, 1)
    c, dc = m.interpolate(eta, r), m.interpolate(eta, r, 1)
    f_pp = -p.a2 + 2 * p.b2 * v / SQ6 + p.c2 * (3 * u * u + v * v)
    f_pq = 2 * u * (p.b2 / SQ6 + p.c2 * v)
    f_qq = -p.a2 - 2 * p.b2 * v / SQ6 + p.c2 * (u * u + 3 * v * v)
    dens = dx**2 + dc**2 + (p.k**2 / r**2 + f_pp) * x * x + 2 * f_pq * x * c + f_qq * c * c
    w = np.ones(n + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    per = (dens * r).reshape(m.n_elements, n + 1) @ w
    return float(np.sum(per * h[:, 0] / (3 * n)))


def test_zero_pair(sub_small):
    form = stability.assemble_B(sub_small)
    assert form.value(np.zeros(form.K_full.shape[0])) == 0.0


def test_matrix_value_matches_refined_simpson(sub_small):
    rng = np.random.default_rng(11)
    form = stability.assemble_B(sub_small)
    r = sub_small.r
    for _ in range(3):
        xi, eta = random_smooth(r, rng), random_smooth(r, rng)
        x = np.column_stack([xi, eta]).ravel()
        ref = fine_b_value(sub_small, xi, eta)
        assert form.value(x) == pytest.approx(ref, rel=1e-8)


def test_derivative_direction_nonnegative(sub_small):
    prof = sub_small
    r = prof.r
    R = prof.mesh.r_eff
    cut = smooth_bump(r, 0.5 * R, 0.45 * R) / smooth_bump(np.array([0.5 * R]), 0.5 * R, 0.45 * R)
    x = np.column_stack([prof.du * cut, prof.dv * cut]).ravel()
    x[0::2][[0, 1, -2, -1]] = 0.0
    x[1::2][[0, 1, -2, -1]] = 0.0
    assert stability.assemble_B(prof).value(x) >= 0.0


@pytest.mark.parametrize("fixture", ["sub_small", "crit_profile"])
def test_B_positive(fixture, request):
    prof = request.getfixturevalue(fixture)
    sr = lowest_spectrum(stability.assemble_B(prof), 3)
    assert sr.lambda_min > 0
    assert np.all(np.diff(sr.eigenvalues) >= 0)
    # the sign does not depend on the pairing used for the eigenproblem
    assert lowest_spectrum(stability.assemble_B(prof, mass="weighted"), 1).lambda_min > 0


def test_B_equals_P0_block(sub_small):
    assert modes.b_equals_p0_block(sub_small) < 1e-12


def test_hardy_zero():
    prof = solved(SUB, n_elements=100)
    z = np.zeros(prof.mesh.n_nodes)
    assert stability.hardy_certificate_B(prof, z, z) == (0.0, 0.0)


@pytest.mark.parametrize("fixture", ["sub_small", "super_profile"])
def test_hardy_identity_random(fixture, request):
    prof = request.getfixturevalue(fixture)
    rng = np.random.default_rng(2)
    for _ in range(20):
        d, w = stability.hardy_certificate_B(prof, random_smooth(prof.r, rng), random_smooth(prof.r, rng))
        assert abs(d - w) <= 1e-8 * (1 + abs(d))


def test_hardy_rewritten_positive_subcritical(sub_small):
    rng = np.random.default_rng(4)
    for _ in range(20):
        _, w = stability.hardy_certificate_B(sub_small, random_smooth(sub_small.r, rng), random_smooth(sub_small.r, rng))
        assert w > 0


def test_hardy_requires_compact_samples(sub_small):
    one = np.ones(sub_small.mesh.n_nodes)
    with pytest.raises(ValueError):
        stability.hardy_certificate_B(sub_small, one, one)


def test_unconverged_profile_rejected():
    mesh = radial.build_mesh(SUB, n_elements=32)
    with pytest.raises(ValueError):
        stability.assemble_B(radial.initial_guess(SUB, mesh))


def test_uniqueness_identical_seeds():
    params = SUB.with_(domain=FiniteDisk(10.0))
    mesh = radial.build_mesh(params, n_elements=100)
    res = stability.uniqueness_probe(params, mesh, n_starts=2, seed=[7, 7])
    assert res.distinct_count == 1
    assert res.max_pairwise_deviation == 0.0


def test_uniqueness_critical():
    params = CRIT.with_(domain=FiniteDisk(20.0))
    mesh = radial.build_mesh(params, n_elements=200)
    res = stability.uniqueness_probe(params, mesh, n_starts=8, seed=1)
    assert res.distinct_count == 1 and res.n_converged == 8
    assert res.max_pairwise_deviation <= 1e-8 * model.bulk_constants(params).s_plus


def test_uniqueness_argument_errors():
    params = SUB.with_(domain=FiniteDisk(10.0))
    mesh = radial.build_mesh(params, n_elements=32)
    with pytest.raises(ValueError):
        stability.uniqueness_probe(params, mesh, n_starts=1)
    with pytest.raises(ValueError):
        stability.uniqueness_probe(params, mesh, n_starts=3, seed=[1, 2])


def test_randomized_guess_in_cone():
    params = SUB.with_(domain=FiniteDisk(10.0))
    mesh = radial.build_mesh(params, n_elements=64)
    for ss in stability.start_seeds(0, 4):
        g = stability.randomized_guess(params, mesh, ss)
        assert np.all(g.u >= 0) and np.all(g.v <= 0) and g.u[0] == 0.0
