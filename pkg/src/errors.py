"""
Exception hierarchy for ILRO Lab.

Unlocked operating points are results, not errors; everything here signals a
caller mistake, a numerical failure or a missing prerequisite.
"""

from typing import Optional


class IlroError(Exception):
    """Root of all project-specific exceptions."""


class DomainError(IlroError, ValueError):
    """An argument lies outside the domain of the operation."""


class OutOfRangeError(DomainError):
    """A frequency lies outside the calibrated band (no extrapolation)."""


class InsufficientWindowError(DomainError):
    """The measurement window holds fewer periods than required."""


class FitError(IlroError):
    """Least-squares calibration could not be performed."""


class ModelInconsistencyError(IlroError):
    """The trivial lock point (f_inj = f_fr) is itself unlocked."""


class IntegrationError(IlroError):
    """The behavioural oscillator state became non-finite."""

    def __init__(self, message: str, time_s: float):
        super().__init__(f"{message} (t = {time_s:.6e} s)")
        self.time_s = time_s


class NoOscillationError(IlroError):
    """A record decayed instead of sustaining oscillation."""

    def __init__(self, message: str, c_farads: Optional[float] = None):
        if c_farads is not None:
            message = f"{message} (C = {c_farads * 1e15:.3f} fF)"
        super().__init__(message)
        self.c_farads = c_farads


class MeasurementError(IlroError):
    """An operating-point measurement was refused."""


class ConfigError(IlroError):
    """The run configuration is missing, malformed or inconsistent."""


class ComparisonError(IlroError):
    """Solver and oracle tables cannot be compared (grids differ)."""
