"""Tests for phasor arithmetic."""

import math

import numpy as np
import pytest

from src.errors import DomainError
from src.phasor import ZERO, Phasor, angle_between, phasor_add, phasor_from_polar, wrap_angle


@pytest.mark.parametrize(
    "raw, expected",
    [(540.0, 180.0), (-180.0, 180.0), (11.31, 11.31), (370.0, 10.0), (-190.0, 170.0), (0.0, 0.0)],
)
def test_wrap_angle(raw, expected):
    assert wrap_angle(raw) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_wrap_angle_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        wrap_angle(bad)


def test_phasor_from_polar_wraps_angle():
    p = phasor_from_polar(1.0, 370.0)
    assert p.magnitude == 1.0
    assert p.angle == pytest.approx(10.0)


def test_zero_phasor_has_zero_angle():
    assert phasor_from_polar(0.0, 135.0) == Phasor(0.0, 0.0)


def test_half_open_boundary():
    assert phasor_from_polar(0.2, -180.0).angle == 180.0


def test_negative_magnitude_rejected():
    with pytest.raises(DomainError):
        phasor_from_polar(-1.0, 0.0)


def test_phasor_add_quadrature():
    total = phasor_add(phasor_from_polar(1.0, 0.0), phasor_from_polar(0.2, 90.0))
    assert total.magnitude == pytest.approx(math.sqrt(1.04), rel=1e-12)
    assert total.angle == pytest.approx(math.degrees(math.atan(0.2)), rel=1e-12)


def test_phasor_add_cancellation():
    assert phasor_add(phasor_from_polar(1.0, 0.0), phasor_from_polar(1.0, 180.0)) == ZERO


def test_phasor_add_identity():
    a = phasor_from_polar(0.37, 25.0)
    assert phasor_add(a, phasor_from_polar(0.0, 0.0)) == a
    assert a + ZERO == a


@pytest.mark.parametrize(
    "a, b, expected",
    [((1.0, 100.0), (1.0, 90.0), 10.0), ((1.0, -170.0), (1.0, 170.0), 20.0), ((0.5, 33.0), (0.5, 33.0), 0.0)],
)
def test_angle_between(a, b, expected):
    assert angle_between(phasor_from_polar(*a), phasor_from_polar(*b)) == pytest.approx(expected)


def test_angle_between_zero_operand():
    with pytest.raises(DomainError):
        angle_between(ZERO, phasor_from_polar(1.0, 0.0))


def test_complex_round_trip():
    p = phasor_from_polar(2.5, -73.0)
    q = Phasor.from_complex(p.to_complex())
    assert q.magnitude == pytest.approx(2.5)
    assert q.angle == pytest.approx(-73.0)


def test_scale_negative_rotates():
    p = phasor_from_polar(1.0, 10.0).scale(-2.0)
    assert p.magnitude == 2.0
    assert p.angle == pytest.approx(-170.0)


def _random_phasors(seed, count):
    rng = np.random.default_rng(seed)
    return [phasor_from_polar(m, a) for m, a in zip(rng.uniform(0.01, 2.0, count), rng.uniform(-180.0, 180.0, count))]


@pytest.mark.parametrize("seed", range(5))
def test_phasor_add_commutative_and_associative(seed):
    a, b, c = _random_phasors(seed, 3)
    assert phasor_add(a, b) == phasor_add(b, a)
    left = phasor_add(phasor_add(a, b), c).to_complex()
    right = phasor_add(a, phasor_add(b, c)).to_complex()
    assert abs(left - right) <= 1e-12 * (a.magnitude + b.magnitude + c.magnitude)


@pytest.mark.parametrize("seed", range(5))
def test_phasor_add_triangle_bounds(seed):
    for a, b in zip(*[iter(_random_phasors(seed, 40))] * 2):
        total = phasor_add(a, b).magnitude
        slack = 1e-12 * (a.magnitude + b.magnitude)
        assert abs(a.magnitude - b.magnitude) - slack <= total <= a.magnitude + b.magnitude + slack


@pytest.mark.parametrize("seed", range(5))
def test_angle_between_antisymmetric(seed):
    for a, b in zip(*[iter(_random_phasors(seed, 40))] * 2):
        assert abs(math.remainder(angle_between(a, b) + angle_between(b, a), 360.0)) < 1e-9
