"""Tests for the stage model, calibration fit and baseline table."""

import math

import numpy as np
import pytest

from src.errors import DomainError, FitError, OutOfRangeError
from src.stage_model import (
    CalibrationSample,
    CalibrationTable,
    FreeRunningPoint,
    KAngleMode,
    StageParams,
    baseline_at,
    build_calibration_table,
    fit_linear_laws,
    i_osc_of_amplitude,
    k_coefficient,
    theta_vi_of_amplitude,
)


def make_params(**overrides):
    values = dict(a_vi=-10.0, theta_vi_0=-1.0, g_m=2e-3, i_osc_0=0.2e-3, theta_iv=85.0, c_load=100e-15)
    values.update(overrides)
    return StageParams(**values)


def make_table():
    points = [
        FreeRunningPoint(6e9, 0.38, 0.9e-3, -4.0, 86.0),
        FreeRunningPoint(7e9, 0.40, 1.0e-3, -5.0, 85.0),
        FreeRunningPoint(8.5e9, 0.44, 1.2e-3, -7.0, 83.0),
    ]
    return CalibrationTable(points=tuple(points), params=make_params())


class TestLaws:
    def test_zero_slope_theta(self):
        p = make_params(a_vi=0.0, theta_vi_0=-5.0)
        for v in (0.0, 0.1, 0.4, 2.0):
            assert theta_vi_of_amplitude(p, v) == -5.0

    def test_linear_theta(self):
        assert theta_vi_of_amplitude(make_params(), 0.4) == pytest.approx(-5.0)

    def test_zero_gm_current(self):
        p = make_params(g_m=0.0, i_osc_0=0.7e-3)
        assert i_osc_of_amplitude(p, 0.3).value == 0.7e-3

    def test_linear_current(self):
        value = i_osc_of_amplitude(make_params(), 0.4)
        assert value.value == pytest.approx(1.0e-3)
        assert not value.clamped

    def test_negative_current_is_clamped(self):
        value = i_osc_of_amplitude(make_params(i_osc_0=-1e-3), 0.1)
        assert value == (0.0, True)

    @pytest.mark.parametrize("fn", [theta_vi_of_amplitude, i_osc_of_amplitude])
    def test_negative_amplitude(self, fn):
        with pytest.raises(DomainError):
            fn(make_params(), -0.1)


class TestParams:
    @pytest.mark.parametrize(
        "overrides",
        [{"c_load": 0.0}, {"n_stages": 3}, {"n_stages": 0}, {"g_m": -1e-3}, {"theta_iv": 95.0}, {"theta_iv": 0.0}],
    )
    def test_invalid(self, overrides):
        with pytest.raises(DomainError):
            make_params(**overrides)

    def test_stage_phase(self):
        assert make_params(n_stages=4).stage_phase == 45.0

    def test_mode_from_string(self):
        assert make_params(k_angle_mode="theta_iv").k_angle_mode is KAngleMode.USE_THETA_IV


class TestK:
    def test_reference_value(self):
        k = k_coefficient(1e-3, 85.0, 7e9, 0.4, 100e-15)
        expected = 1e-3 * math.radians(85.0) / (2 * math.pi * 7e9 * 0.4 * 1e-13)
        assert k == pytest.approx(expected, rel=1e-12)
        assert k == pytest.approx(0.8434, abs=5e-4)

    def test_joint_scaling_invariance(self):
        base = k_coefficient(1e-3, 85.0, 7e9, 0.4, 100e-15)
        assert k_coefficient(3e-3, 85.0, 7e9, 1.2, 100e-15) == pytest.approx(base, rel=1e-12)

    @pytest.mark.parametrize("index", range(5))
    def test_non_positive_argument(self, index):
        args = [1e-3, 85.0, 7e9, 0.4, 100e-15]
        args[index] = 0.0
        with pytest.raises(DomainError):
            k_coefficient(*args)


class TestFit:
    def samples(self, a_vi=-10.0, theta_0=-1.0, g_m=2e-3, i_0=0.2e-3):
        return [
            CalibrationSample(v, a_vi * v + theta_0, g_m * v + i_0, 7e9, 100e-15)
            for v in (0.30, 0.35, 0.40, 0.45, 0.50)
        ]

    def test_exact_round_trip(self):
        fit = fit_linear_laws(self.samples())
        assert fit.a_vi == pytest.approx(-10.0, abs=1e-9)
        assert fit.theta_vi_0 == pytest.approx(-1.0, abs=1e-9)
        assert fit.g_m == pytest.approx(2e-3, abs=1e-9)
        assert fit.i_osc_0 == pytest.approx(0.2e-3, abs=1e-9)
        assert fit.theta_vi_fit.r2 == pytest.approx(1.0)
        assert fit.theta_vi_fit.rms < 1e-9

    def test_two_samples(self):
        with pytest.raises(FitError):
            fit_linear_laws(self.samples()[:2])

    def test_equal_amplitudes(self):
        same = [CalibrationSample(0.4, -5.0 + i, 1e-3, 7e9, 1e-13) for i in range(4)]
        with pytest.raises(FitError):
            fit_linear_laws(same)

    def test_build_table_negative_gm(self):
        points = make_table().points
        with pytest.raises(FitError):
            build_calibration_table(points, self.samples(g_m=-1e-3, i_0=2e-3), c_load=1e-13)

    def test_build_table(self):
        table = build_calibration_table(make_table().points, self.samples(), c_load=1e-13)
        assert table.params.a_vi == pytest.approx(-10.0)
        assert table.params.theta_iv == pytest.approx(np.mean([86.0, 85.0, 83.0]))
        assert table.fit_residuals["i_osc_r2"] == pytest.approx(1.0)


class TestBaseline:
    def test_node_is_exact(self):
        table = make_table()
        assert baseline_at(table, 7e9) == table.points[1]

    def test_midpoint_is_mean(self):
        b = baseline_at(make_table(), 6.5e9)
        assert b.v_osc_fr == pytest.approx(0.39)
        assert b.i_osc_fr == pytest.approx(0.95e-3)
        assert b.theta_vi_fr == pytest.approx(-4.5)
        assert b.theta_iv_fr == pytest.approx(85.5)

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            baseline_at(make_table(), 5e9)

    def test_points_sorted(self):
        table = make_table()
        shuffled = CalibrationTable(points=tuple(reversed(table.points)), params=table.params)
        assert [p.f_fr for p in shuffled.points] == [6e9, 7e9, 8.5e9]

    def test_duplicate_frequency(self):
        p = FreeRunningPoint(7e9, 0.4, 1e-3, -5.0, 85.0)
        with pytest.raises(DomainError):
            CalibrationTable(points=(p, p, FreeRunningPoint(8e9, 0.4, 1e-3, -5.0, 85.0)), params=make_params())


def test_table_save_load_round_trip(tmp_path):
    table = build_calibration_table(make_table().points, TestFit().samples(), c_load=1e-13)
    table.save(tmp_path / "table.csv", tmp_path / "params.json")
    loaded = CalibrationTable.load(tmp_path / "table.csv", tmp_path / "params.json")
    assert loaded.points == table.points
    assert loaded.params == table.params
    assert loaded.fit_residuals == pytest.approx(table.fit_residuals)
