from __future__ import annotations

import math

import numpy as np
import pytest

from defectlab import full2d, model, modes
from defectlab.radial import QuadState

from conftest import SUB, solved
from oracles import random_smooth


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def bulk_f(params, Q):
    """-a2/2 tr Q^2 - b2/3 tr Q^3 + c2/4 (tr Q^2)^2, batched over leading axes."""
    t2 = np.einsum("...ij,...ji->...", Q, Q)
    t3 = np.einsum("...ij,...jk,...ki->...", Q, Q, Q)
    return -params.a2 / 2 * t2 - params.b2 / 3 * t3 + params.c2 / 4 * t2**2


def mode_field(mesh, n_phi, m, a, b, d):
    """w = (a cos m phi, b cos m phi, -d sin m phi, 0, 0)."""
    phi = full2d.phi_grid(n_phi)
    w = np.zeros((5, mesh.n_nodes, n_phi))
    w[0] = np.outer(a, np.cos(m * phi))
    w[1] = np.outer(b, np.cos(m * phi))
    w[2] = -np.outer(d, np.sin(m * phi))
    return full2d.PerturbationField(mesh, phi, w)


# --------------------------------------------------------------------------- reconstruction


def test_reconstruction_trace_free_and_symmetric(sub_disk10):
    qf = full2d.reconstruct_Q(sub_disk10, 16)
    assert qf.trace_max() < 1e-14
    np.testing.assert_allclose(qf.matrices, np.swapaxes(qf.matrices, -1, -2), atol=0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_reconstruction_equivariance(k):
    phi = full2d.phi_grid(16)
    rng = np.random.default_rng(k)
    u, v = rng.normal(size=4), rng.normal(size=4)
    Q = full2d.radial_tensor(k, phi, u, v)  # (4, n_phi, 3, 3)
    R = rot_z(0.5 * k * (phi[1] - phi[0]))
    for j in range(15):
        np.testing.assert_allclose(Q[:, j + 1], R @ Q[:, j] @ R.T, atol=1e-12)


def test_e3_is_eigenvector(sub_disk10):
    qf = full2d.reconstruct_Q(sub_disk10, 16)
    v = np.broadcast_to(np.asarray(sub_disk10.v)[:, None], qf.shape)
    Qe3 = qf.matrices @ np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(Qe3[..., :2], 0.0, atol=1e-15)
    np.testing.assert_allclose(Qe3[..., 2], math.sqrt(2.0 / 3.0) * v, rtol=1e-13)


def test_boundary_is_uniaxial_minimum(sub_disk10):
    qf = full2d.reconstruct_Q(sub_disk10, 16)
    s = model.bulk_constants(SUB).s_plus
    n, _ = full2d.frame_vectors(1, qf.phi)
    expected = s * (np.einsum("pi,pj->pij", n, n) - np.eye(3) / 3)
    np.testing.assert_allclose(qf.matrices[-1], expected, atol=1e-13)


def test_basis_orthonormal():
    E = full2d.basis(1, full2d.phi_grid(8))
    gram = np.einsum("plij,pmij->plm", E, E)
    np.testing.assert_allclose(gram, np.broadcast_to(np.eye(5), gram.shape), atol=1e-15)
    np.testing.assert_allclose(np.trace(E, axis1=-2, axis2=-1), 0.0, atol=1e-15)


def test_el_residual_second_order(sub_disk10):
    errs = []
    for n_phi, n in ((32, 49), (64, 97), (128, 193)):
        qf = full2d.reconstruct_Q(sub_disk10, n_phi, np.linspace(2.0, 8.0, n))
        errs.append(full2d.el_residual(qf, SUB))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


def test_el_residual_trivial_fields():
    r = np.linspace(1.0, 3.0, 11)
    s = model.bulk_constants(SUB).s_plus
    Q0 = s * (np.outer([1.0, 0, 0], [1.0, 0, 0]) - np.eye(3) / 3)
    assert full2d.el_residual(full2d.constant_field(r, 8, 1, Q0), SUB) < 1e-14
    assert full2d.el_residual(full2d.constant_field(r, 8, 1, np.zeros((3, 3))), SUB) == 0.0


def test_vtk_export(sub_disk10):
    qf = full2d.reconstruct_Q(sub_disk10, 8, np.linspace(0.0, 10.0, 5))
    text = qf.to_vtk_text()
    assert "POINTS 40 double" in text and "SCALARS Q22 double 1" in text


# --------------------------------------------------------------------------- second variation


def test_zero_perturbation(sub_small):
    pf = full2d.PerturbationField(sub_small.mesh, full2d.phi_grid(16), np.zeros((5, sub_small.mesh.n_nodes, 16)))
    assert full2d.L_direct(sub_small, pf) == 0.0
    assert full2d.mode_sum_check(sub_small, pf).via_modes == 0.0


@pytest.mark.parametrize("m", [0, 1, 3])
def test_single_V1_mode(sub_small, m):
    rng = np.random.default_rng(20 + m)
    r = sub_small.r
    a, b, d = (random_smooth(r, rng) for _ in range(3))
    if m == 0:
        # sin(0 phi) vanishes: the m = 0 field has no w2 part
        pf = mode_field(sub_small.mesh, 16, 0, a, b, np.zeros_like(r))
        ref = 2 * np.pi * modes.pm_value(sub_small, 0, a, b, np.zeros_like(r))
    else:
        pf = mode_field(sub_small.mesh, 16, m, a, b, d)
        ref = np.pi * modes.pm_value(sub_small, m, a, b, d)
    assert full2d.L_direct(sub_small, pf) == pytest.approx(ref, rel=1e-11)
    res = full2d.mode_sum_check(sub_small, pf)
    assert set(res.terms) == ({"V1:0"} if m == 0 else {f"V1:{m}", f"V1:{-m}"})
    assert res.discrepancy < 1e-12


def test_v2_only_positive(sub_small):
    pf = full2d.random_band_limited(sub_small, 16, 4, np.random.default_rng(3)).project("V2")
    res = full2d.mode_sum_check(sub_small, pf)
    assert res.direct > 0
    assert all(key.startswith("V2") for key in res.terms)
    assert res.discrepancy < 1e-12


def test_aliasing_rejected(sub_small):
    pf = full2d.random_band_limited(sub_small, 16, 7, np.random.default_rng(0))
    with pytest.raises(ValueError, match="aliasing"):
        full2d.L_direct(sub_small, pf)


def test_against_matrix_oracle(sub_small):
    """Whole integrand rebuilt from 3x3 matrices: phi-derivatives by FFT, bulk by an exact quartic stencil."""
    prof, p = sub_small, sub_small.params
    pf = full2d.random_band_limited(prof, 16, 3, np.random.default_rng(9))
    st = QuadState.from_profile(prof, 2 * prof.mesh.degree + 4)
    E = full2d.basis(p.k, pf.phi)
    W = np.moveaxis(st.quad.values(np.moveaxis(pf.w, 1, -1)), 1, -1)  # (5, ne, nq, n_phi)
    dW = np.moveaxis(st.quad.derivs(np.moveaxis(pf.w, 1, -1)), 1, -1)
    P = np.einsum("l...p,plij->...pij", W, E)
    Pr = np.einsum("l...p,plij->...pij", dW, E)
    freq = np.fft.fftfreq(16, 1.0 / 16)
    Pphi = np.real(np.fft.ifft(1j * freq[:, None, None] * np.fft.fft(P, axis=-3), axis=-3))
    r = st.r[..., None]
    grad = np.sum(Pr**2, axis=(-2, -1)) + np.sum(Pphi**2, axis=(-2, -1)) / r**2
    Q = full2d.radial_tensor(p.k, pf.phi, st.u, st.v)
    f = {t: bulk_f(p, Q + t * P) for t in (-2, -1, 0, 1, 2)}
    f2 = (-f[2] + 16 * f[1] - 30 * f[0] + 16 * f[-1] - f[-2]) / 12
    ring = np.sum(grad + f2, axis=-1) * (2 * np.pi / 16)
    ref = float(np.sum(ring * st.quad.rw))
    assert full2d.L_direct(prof, pf) == pytest.approx(ref, rel=1e-10)


def test_translation_mode_cost_decays():
    """Cut-off x-translation of the profile: L equals pi int chi'^2 |T|^2 r dr and falls with R_eff."""
    vals = []
    for R in (30.0, 60.0):
        prof = solved(SUB, n_elements=1000, r_eff=R)
        r = prof.r
        chi = modes.smooth_step((R - r) / (0.5 * R))
        u_over_r = np.where(r > 0, prof.u / np.where(r > 0, r, 1.0), prof.du[0])
        pf = mode_field(prof.mesh, 16, 1, prof.dv * chi, prof.du * chi, u_over_r * chi)
        L = full2d.L_direct(prof, pf)
        # cutoff identity for an exact kernel element, by fine quadrature
        rr = np.linspace(0.5 * R, R, 20001)
        x = (R - rr) / (0.5 * R)
        h = 1e-6
        dchi = -(modes.smooth_step(x + h) - modes.smooth_step(x - h)) / (2 * h) / (0.5 * R)
        u, du, v, dv = prof.evaluate(rr)
        integrand = dchi**2 * (du**2 + dv**2 + u**2 / rr**2) * rr
        ref = np.pi * np.trapezoid(integrand, rr)
        assert L == pytest.approx(ref, rel=1e-4)
        vals.append(L)
    assert vals[1] < vals[0]
