from __future__ import annotations

import numpy as np
import pytest
from scipy.special import jn_zeros

from defectlab import fem, spectrum
from defectlab.fem import Grading, RadialMesh
from defectlab.spectrum import QuadForm, lowest_spectrum, selection_map


def bessel_form(m: int, n_elements: int, degree: int = 4, shift: float = 0.0) -> QuadForm:
    """-(r w')'/r + m^2 w / r^2 + shift on the unit disk, w(1) = 0 (and w(0) = 0 for m != 0)."""
    mesh = RadialMesh(fem.graded_vertices(1.0, n_elements, Grading("uniform")), degree)
    q = mesh.quadrature(degree + 3)
    pot = (m * m / q.r**2 + shift)[None, None]
    K = fem.assemble_form(q, pot)
    M = fem.mass_matrix(q, 1)
    pinned = [mesh.n_nodes - 1] + ([0] if m else [])
    return QuadForm(K, M, selection_map(mesh.n_nodes, pinned), 1, f"bessel{m}")


@pytest.mark.parametrize("m", [0, 1, 3])
@pytest.mark.parametrize("n_elements", [40, 200])
def test_bessel_eigenvalues(m, n_elements):
    """Dense (n <= 512 free dofs) and shift-invert paths against squared Bessel zeros."""
    sr = lowest_spectrum(bessel_form(m, n_elements), 3)
    expected = jn_zeros(m, 3) ** 2
    np.testing.assert_allclose(sr.eigenvalues, expected, rtol=1e-8)
    assert sr.method == ("dense" if n_elements == 40 else "shift-invert")
    assert np.all(sr.residuals < 1e-8 * expected.max())


def test_negative_spectrum_shift_retry():
    sr = lowest_spectrum(bessel_form(0, 200, shift=-50.0), 2)
    np.testing.assert_allclose(sr.eigenvalues, jn_zeros(0, 2) ** 2 - 50.0, rtol=1e-8)
    assert sr.shift < sr.eigenvalues[0]


def test_identity_pencil():
    form = bessel_form(1, 200)
    same = QuadForm(form.M_full, form.M_full, form.T, 1, "identity")
    sr = lowest_spectrum(same, 4)
    np.testing.assert_allclose(sr.eigenvalues, 1.0, rtol=1e-10)
    small = bessel_form(1, 20)
    sr = lowest_spectrum(QuadForm(small.M_full, small.M_full, small.T, 1, "identity"), 4)
    np.testing.assert_allclose(sr.eigenvalues, 1.0, rtol=1e-12)


def test_rayleigh_of_eigenvector():
    form = bessel_form(2, 200)
    sr = lowest_spectrum(form, 2)
    for i in range(2):
        assert form.rayleigh(sr.eigenvectors[:, i]) == pytest.approx(sr.eigenvalues[i], rel=1e-10)
        assert form.mass_value(sr.eigenvectors[:, i]) == pytest.approx(1.0, rel=1e-10)
    # constraints are honored by the full vectors
    assert sr.eigenvectors[-1, 0] == 0.0 and sr.eigenvectors[0, 0] == 0.0


def test_restrict_expand_round_trip():
    form = bessel_form(0, 30)
    y = np.random.default_rng(0).normal(size=form.n_free)
    np.testing.assert_allclose(form.restrict(form.expand(y)), y, atol=1e-13)


def test_result_serialization():
    form = bessel_form(0, 30)
    sr = lowest_spectrum(form, 2)
    d = sr.to_dict()
    assert d["label"] == "bessel0" and len(d["eigenvalues"]) == 2
    r = np.linspace(0, 1, form.K_full.shape[0])
    text = sr.eigenvector_csv(1, r)
    assert text.splitlines()[0] == "r,w0"
    assert len(text.splitlines()) == len(r) + 1


def test_banded_factorization_rejects_indefinite():
    form = bessel_form(0, 200, shift=-50.0)
    with pytest.raises(spectrum.FactorizationFailure):
        spectrum.BandedShiftInvert(form.stiffness, form.mass, 0.0)
