from __future__ import annotations


class DefectLabError(Exception):
    """Base class for numeric failures raised by the package."""


class NonConvergence(DefectLabError):
    def __init__(self, message: str, last_iterate=None, residual: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class SignViolation(DefectLabError):
    """Converged profile left the cone u >= 0, v <= 0 (a spurious branch)."""

    def __init__(self, message: str, profile=None):
        super().__init__(message)
        self.profile = profile


class FactorizationFailure(DefectLabError):
    pass


class CriticalRegimeError(DefectLabError):
    """Hardy factor w0 = v' eta is unavailable because v' vanishes identically."""


class NoNegativeDirection(DefectLabError):
    pass
