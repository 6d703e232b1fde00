"""Radial point defects of the two-dimensional Landau-de Gennes model.

Profiles are computed by high-order finite elements in r; their stability is
certified through the spectra of the radial and azimuthal second variations.
"""

from __future__ import annotations

from .errors import (
    CriticalRegimeError,
    DefectLabError,
    FactorizationFailure,
    NoNegativeDirection,
    NonConvergence,
    SignViolation,
)
from .model import (
    AsymptoticCoeffs,
    BulkConstants,
    FiniteDisk,
    ModelParams,
    Regime,
    WholePlane,
    asymptotic_coeffs,
    bulk_constants,
    bulk_f,
    bulk_grad,
    bulk_hessian,
    minima_of_f,
)
from .radial import Profile, build_mesh, diagnose, initial_guess, solve_profile
from .spectrum import QuadForm, SpectrumResult, lowest_spectrum

__all__ = [
    "AsymptoticCoeffs",
    "BulkConstants",
    "CriticalRegimeError",
    "DefectLabError",
    "FactorizationFailure",
    "FiniteDisk",
    "ModelParams",
    "NoNegativeDirection",
    "NonConvergence",
    "Profile",
    "QuadForm",
    "Regime",
    "SignViolation",
    "SpectrumResult",
    "WholePlane",
    "asymptotic_coeffs",
    "build_mesh",
    "bulk_constants",
    "bulk_f",
    "bulk_grad",
    "bulk_hessian",
    "diagnose",
    "initial_guess",
    "lowest_spectrum",
    "minima_of_f",
    "solve_profile",
]

__version__ = "0.1.0"
