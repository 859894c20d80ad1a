"""
Phasor arithmetic shared by the solver and the behavioural oracle.

Angles are kept in degrees everywhere outside trigonometric calls and are
normalized to the half-open interval (-180, 180]. A zero-magnitude phasor
always carries angle 0.
"""

from dataclasses import dataclass

import numpy as np

from src.errors import DomainError

# Raw angle value in degrees
AngleDeg = float

# Relative magnitude below which a vector sum is treated as exact cancellation
CANCELLATION_RTOL = 1e-12


def wrap_angle(x: AngleDeg) -> AngleDeg:
    """
    Map an angle onto (-180, 180].

    Args:
        x: Angle in degrees, must be finite.

    Returns:
        The equivalent angle modulo 360 inside (-180, 180].

    Raises:
        DomainError: If x is NaN or infinite.
    """
    if not np.isfinite(x):
        raise DomainError(f"Cannot wrap non-finite angle {x!r}")
    r = float(np.fmod(x, 360.0))
    if r <= -180.0:
        r += 360.0
    elif r > 180.0:
        r -= 360.0
    return r


@dataclass(frozen=True)
class Phasor:
    """Fundamental-tone complex amplitude (peak magnitude, angle in degrees)."""

    magnitude: float
    angle: AngleDeg

    def __post_init__(self):
        if not np.isfinite(self.magnitude) or self.magnitude < 0.0:
            raise DomainError(f"Phasor magnitude must be finite and >= 0, got {self.magnitude!r}")
        angle = 0.0 if self.magnitude == 0.0 else wrap_angle(self.angle)
        object.__setattr__(self, "angle", angle)

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        if z == 0:
            return cls(0.0, 0.0)
        return cls(float(np.abs(z)), float(np.angle(z, deg=True)))

    def to_complex(self) -> complex:
        return complex(self.magnitude * np.exp(1j * np.radians(self.angle)))

    def rotate(self, degrees: AngleDeg) -> "Phasor":
        return Phasor(self.magnitude, self.angle + degrees)

    def scale(self, factor: float) -> "Phasor":
        if factor < 0:
            return Phasor(-factor * self.magnitude, self.angle + 180.0)
        return Phasor(factor * self.magnitude, self.angle)

    def __add__(self, other: "Phasor") -> "Phasor":
        return phasor_add(self, other)


ZERO = Phasor(0.0, 0.0)


def phasor_from_polar(magnitude: float, angle: AngleDeg) -> Phasor:
    """
    Build a phasor from polar coordinates.

    Args:
        magnitude: Non-negative peak amplitude (volts or amperes).
        angle: Angle in degrees; wrapped onto (-180, 180].

    Raises:
        DomainError: If magnitude is negative or the angle is not finite.
    """
    if magnitude < 0:
        raise DomainError(f"Negative phasor magnitude {magnitude!r}")
    if not np.isfinite(angle):
        raise DomainError(f"Non-finite phasor angle {angle!r}")
    return Phasor(float(magnitude), float(angle))


def phasor_add(a: Phasor, b: Phasor) -> Phasor:
    """Vector sum of two phasors, e.g. I_osc + I_inj = I_t."""
    if b.magnitude == 0.0:
        return a
    if a.magnitude == 0.0:
        return b
    z = a.to_complex() + b.to_complex()
    if np.abs(z) <= CANCELLATION_RTOL * (a.magnitude + b.magnitude):
        return ZERO
    return Phasor.from_complex(z)


def angle_between(a: Phasor, b: Phasor) -> AngleDeg:
    """
    Angle of a measured from b, wrapped onto (-180, 180].

    Raises:
        DomainError: If either phasor has zero magnitude.
    """
    if a.magnitude <= 0.0 or b.magnitude <= 0.0:
        raise DomainError("Angle between phasors is undefined for a zero-magnitude operand")
    return wrap_angle(a.angle - b.angle)
