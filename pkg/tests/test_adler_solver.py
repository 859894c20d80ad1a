"""Tests for the classic and extended Adler solvers, sweeps and locking ranges."""

import math

import numpy as np
import pandas as pd
import pytest

from src import adler_solver
from src.adler_solver import (
    InjectionSpec,
    LockSolution,
    SolverSettings,
    SweepMode,
    UnlockReason,
    Unlocked,
    check_solution,
    k_along_sweep,
    locking_range,
    locking_ranges_frame,
    max_psi,
    phi_0_for_psi,
    read_locking_range_csv,
    read_sweep_csv,
    solve_classic,
    solve_extended,
    sweep_ffr,
    sweep_finj,
    triangle_psi,
    write_sweep_csv,
)
from src.errors import DomainError, ModelInconsistencyError, OutOfRangeError
from src.stage_model import baseline_at
from tests.conftest import F_FR, I_FR, V_FR

# theta_VI,fr = -45 deg: required psi = 45 * (f_inj / f_fr - 1)
PSI_PER_UNIT_RATIO = 45.0


def f_inj_for_psi(psi: float) -> float:
    return F_FR * (1.0 + psi / PSI_PER_UNIT_RATIO)


class TestClassic:
    def test_aligned(self, flat_table, flat_params):
        sol = solve_classic(baseline_at(flat_table, F_FR), InjectionSpec(0.2, F_FR), flat_params)
        assert sol.locked
        assert sol.phi_0 == pytest.approx(0.0, abs=1e-9)
        assert sol.psi == pytest.approx(0.0, abs=1e-12)
        assert sol.i_t_mag == pytest.approx(1.2 * I_FR, rel=1e-12)
        assert sol.v_osc_mag == V_FR

    def test_edge_geometry(self):
        psi = max_psi(0.2)
        assert psi == pytest.approx(11.537, abs=1e-3)
        assert phi_0_for_psi(0.2, psi) == pytest.approx(101.537, abs=1e-3)
        assert triangle_psi(0.2, 90.0 + psi) == pytest.approx(psi, abs=1e-9)

    def test_closed_form(self, flat_table, flat_params):
        for psi in (-10.0, -3.0, 2.0, 7.5, 11.0):
            sol = solve_classic(baseline_at(flat_table, F_FR), InjectionSpec(0.2, f_inj_for_psi(psi)), flat_params)
            expected = psi + math.degrees(math.asin(math.sin(math.radians(psi)) / 0.2))
            assert sol.phi_0 == pytest.approx(expected, abs=1e-8)
            assert sol.psi == pytest.approx(psi, abs=1e-9)

    def test_dense_grid_scan(self):
        psi = 4.0
        phi = phi_0_for_psi(0.1, psi)
        grid = np.arange(-180.0, 180.0, 0.001)
        scan = np.degrees(np.arctan2(0.1 * np.sin(np.radians(grid)), 1.0 + 0.1 * np.cos(np.radians(grid))))
        # Stable branch only: |phi_0| < 90 + psi_max
        mask = np.abs(grid) < 90.0 + max_psi(0.1)
        best = grid[mask][np.argmin(np.abs(scan[mask] - psi))]
        assert phi == pytest.approx(best, abs=1e-3)

    def test_beyond_edge_is_unlocked(self, flat_table, flat_params):
        f_inj = f_inj_for_psi(max_psi(0.2) + 1e-6)
        out = solve_classic(baseline_at(flat_table, F_FR), InjectionSpec(0.2, f_inj), flat_params)
        assert isinstance(out, Unlocked)
        assert out.reason is UnlockReason.NO_ROOT

    @pytest.mark.parametrize("eps", [1.0, 1.5, -0.1])
    def test_bad_epsilon(self, eps):
        with pytest.raises(DomainError):
            InjectionSpec(eps, F_FR)

    def test_arctan_limit_of_edge(self):
        # The small-injection edge arctan(eps) approaches the exact arcsin(eps)
        assert math.degrees(math.atan(1e-3)) / max_psi(1e-3) == pytest.approx(1.0, abs=1e-6)
        assert abs(math.degrees(math.atan(0.2)) / max_psi(0.2) - 1.0) <= 0.02

    def test_single_phase_rejected(self, flat_table, flat_params):
        inj = InjectionSpec(0.1, F_FR, multi_phase=False)
        with pytest.raises(DomainError):
            solve_classic(baseline_at(flat_table, F_FR), inj, flat_params)
        with pytest.raises(DomainError):
            solve_extended(flat_table, F_FR, inj)

    def test_invariants(self, flat_table, flat_params):
        sol = solve_classic(baseline_at(flat_table, F_FR), InjectionSpec(0.15, f_inj_for_psi(5.0)), flat_params)
        closure, phase = check_solution(sol, 0.15, I_FR, flat_params.stage_phase)
        assert closure < 1e-10
        assert phase == pytest.approx(0.0, abs=1e-9)


class TestExtended:
    def test_no_injection(self, sloped_table):
        sol = solve_extended(sloped_table, F_FR, InjectionSpec(0.0, F_FR))
        assert sol.locked
        assert sol.v_osc_mag == V_FR
        assert sol.psi == 0.0
        assert sol.theta_vi == pytest.approx(-45.0)

    def test_no_injection_detuned(self, sloped_table):
        out = solve_extended(sloped_table, F_FR, InjectionSpec(0.0, 1.01 * F_FR))
        assert out == Unlocked(UnlockReason.NO_ROOT, out.detail)

    @pytest.mark.parametrize("psi", [-11.0, -6.0, -1.0, 0.0, 3.0, 8.0, 11.2])
    def test_reduces_to_classic(self, flat_table, flat_params, psi):
        inj = InjectionSpec(0.2, f_inj_for_psi(psi))
        classic = solve_classic(baseline_at(flat_table, F_FR), inj, flat_params)
        extended = solve_extended(flat_table, F_FR, inj)
        assert extended.locked
        assert extended.phi_0 == pytest.approx(classic.phi_0, rel=1e-9, abs=1e-9)
        assert extended.psi == pytest.approx(classic.psi, rel=1e-9, abs=1e-9)
        # Amplitude follows |I_t| through the constant-k constraint
        assert extended.v_osc_mag == pytest.approx(V_FR * classic.i_t_mag / I_FR, rel=1e-9)

    def test_reduction_unlocked_outside(self, flat_table):
        out = solve_extended(flat_table, F_FR, InjectionSpec(0.2, f_inj_for_psi(max_psi(0.2) + 0.5)))
        assert not out.locked

    def test_out_of_band(self, flat_table):
        with pytest.raises(OutOfRangeError):
            solve_extended(flat_table, 10e9, InjectionSpec(0.2, F_FR))

    def test_sloped_trivial_point(self, sloped_table, sloped_params):
        sol = solve_extended(sloped_table, F_FR, InjectionSpec(0.2, F_FR))
        assert isinstance(sol, LockSolution)
        assert sol.residual_norm < 1e-10
        assert sol.v_osc_mag > V_FR
        closure, phase = check_solution(sol, 0.2, I_FR, sloped_params.stage_phase)
        assert closure < 1e-8
        assert abs(phase) < 1e-6

    def test_stable_branch(self, sloped_table):
        for psi in (-8.0, 0.0, 8.0):
            sol = solve_extended(sloped_table, F_FR, InjectionSpec(0.2, f_inj_for_psi(psi)))
            assert sol.locked
            assert abs(sol.phi_0 - sol.psi) <= 90.0

    def test_seed_gives_same_root(self, sloped_table):
        inj = InjectionSpec(0.2, f_inj_for_psi(4.0))
        plain = solve_extended(sloped_table, F_FR, inj)
        seeded = solve_extended(sloped_table, F_FR, inj, seed=(plain.v_osc_mag * 1.02, plain.phi_0 + 3.0))
        assert seeded.phi_0 == pytest.approx(plain.phi_0, abs=1e-7)
        assert seeded.v_osc_mag == pytest.approx(plain.v_osc_mag, rel=1e-8)

    def test_collapse_in_seeded_pass_falls_back_to_grid(self, sloped_table, monkeypatch):
        inj = InjectionSpec(0.2, f_inj_for_psi(4.0))
        expected = solve_extended(sloped_table, F_FR, inj)
        real = adler_solver._damped_newton
        starts = []

        def first_pass_collapses(fun, x0, settings):
            starts.append(np.array(x0, dtype=float))
            if len(starts) == 1:
                return adler_solver._NewtonResult(starts[0], 1.0, "collapse", 0)
            return real(fun, x0, settings)

        monkeypatch.setattr(adler_solver, "_damped_newton", first_pass_collapses)
        out = solve_extended(sloped_table, F_FR, inj)
        assert len(starts) == 2
        assert out.locked
        assert out.phi_0 == pytest.approx(expected.phi_0, abs=1e-7)
        assert out.v_osc_mag == pytest.approx(expected.v_osc_mag, rel=1e-8)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_exhaustive_grid(self, sloped_table, sloped_params, seed):
        rng = np.random.default_rng(seed)
        eps = float(rng.uniform(0.05, 0.2))
        psi = float(rng.uniform(-0.7, 0.7) * max_psi(eps))
        inj = InjectionSpec(eps, f_inj_for_psi(psi))
        sol = solve_extended(sloped_table, F_FR, inj)
        assert sol.locked
        baseline = baseline_at(sloped_table, F_FR)
        ctx = adler_solver._context(baseline, inj, sloped_params)
        v_grid, phi_grid = adler_solver._grid_seed(ctx, SolverSettings(grid_v=1000, grid_phi=3600))
        # Within a few cells of the 1e-3 x 0.1 deg lattice
        assert sol.v_osc_mag / baseline.v_osc_fr == pytest.approx(v_grid, abs=5e-3)
        assert abs(math.remainder(sol.phi_0 - math.degrees(phi_grid), 360.0)) < 0.5

    def test_theta_iv_mode_keeps_k_constant(self, flat_table_theta_iv):
        sweep = sweep_finj(flat_table_theta_iv, F_FR, [0.2], None, np.linspace(6.5e9, 7.5e9, 11))
        ks = [k for _, k in k_along_sweep(sweep, 0.2, 100e-15)]
        assert len(ks) >= 5
        assert np.ptp(ks) / np.mean(ks) < 1e-8


class TestSweeps:
    GRID = np.arange(6.0e9, 8.0e9 + 1, 0.1e9)

    def test_finj_trivial_row(self, sloped_table):
        sweep = sweep_finj(sloped_table, F_FR, [0.05, 0.2], None, self.GRID)
        for eps in (0.05, 0.2):
            row = next(r for r in sweep.block(eps) if r.sweep_value == F_FR)
            assert row.locked
            assert abs(row.outcome.psi) < 1.0

    def test_locked_count_monotone(self, flat_table):
        sweep = sweep_finj(flat_table, F_FR, [0.05, 0.10, 0.15, 0.20], None, self.GRID)
        counts = [sweep.locked_count(e) for e in (0.05, 0.10, 0.15, 0.20)]
        assert counts == sorted(counts)
        assert len(sweep.rows) == 4 * len(self.GRID)

    def test_unlocked_rows_contiguous_at_ends(self, flat_table):
        sweep = sweep_finj(flat_table, F_FR, [0.05], None, self.GRID)
        flags = [r.locked for r in sweep.block(0.05)]
        first, last = flags.index(True), len(flags) - 1 - flags[::-1].index(True)
        assert all(flags[first : last + 1])
        assert not flags[0] and not flags[-1]

    def test_phi0_monotone_across_band(self, flat_table):
        sweep = sweep_finj(flat_table, F_FR, [0.2], None, self.GRID)
        phis = [r.outcome.phi_0 for r in sweep.block(0.2) if r.locked]
        assert np.all(np.diff(phis) > 0)

    @pytest.mark.parametrize("eps", [0.1, 0.2])
    def test_adjacent_points_continuous(self, sloped_table, eps):
        grid = np.arange(6.9e9, 7.1e9 + 1, 0.01e9)
        sweep = sweep_finj(sloped_table, F_FR, [eps], None, grid)
        rows = sweep.block(eps)
        assert all(r.locked for r in rows)
        phis = np.array([r.outcome.phi_0 for r in rows])
        amps = np.array([r.outcome.v_osc_mag for r in rows])
        assert np.max(np.abs(np.diff(phis))) < 5.0
        assert np.max(np.abs(np.diff(amps)) / amps[:-1]) < 0.05

    def test_ffr_trivial_row(self, sloped_table):
        sweep = sweep_ffr(sloped_table, F_FR, [0.1], None, self.GRID)
        row = next(r for r in sweep.block(0.1) if r.sweep_value == F_FR)
        assert row.locked
        assert sweep.swept is SweepMode.SWEEP_FFR

    def test_empty_grid(self, flat_table):
        with pytest.raises(DomainError):
            sweep_ffr(flat_table, F_FR, [0.1], None, [])

    def test_csv_round_trip(self, flat_table, tmp_path):
        sweep = sweep_finj(flat_table, F_FR, [0.05, 0.2], None, self.GRID)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(sweep, path)
        loaded = read_sweep_csv(path)
        pd.testing.assert_frame_equal(loaded.to_frame(), sweep.to_frame())
        assert loaded.swept is sweep.swept
        assert loaded.fixed_hz == sweep.fixed_hz

    def test_classic_sweep_matches_solve(self, flat_table, flat_params):
        sweep = sweep_finj(flat_table, F_FR, [0.2], None, self.GRID, classic=True)
        baseline = baseline_at(flat_table, F_FR)
        for row in sweep.block(0.2):
            direct = solve_classic(baseline, InjectionSpec(0.2, row.sweep_value), flat_params)
            assert row.outcome == direct


class TestLockingRange:
    def test_classic_edges(self, flat_table):
        lr = locking_range(flat_table, F_FR, 0.2, mode=SweepMode.SWEEP_FINJ, classic=True, tol_hz=1e3)
        assert lr.f_hi == pytest.approx(f_inj_for_psi(max_psi(0.2)), abs=2e3)
        assert lr.f_lo == pytest.approx(f_inj_for_psi(-max_psi(0.2)), abs=2e3)
        assert abs(lr.asymmetry) < 1e-5
        assert not (lr.clipped_lo or lr.clipped_hi)

    @pytest.mark.parametrize("eps", [0.05, 0.10, 0.15, 0.20])
    def test_classic_nearly_symmetric(self, flat_table, eps):
        lr = locking_range(flat_table, F_FR, eps, classic=True, tol_hz=1e4)
        assert abs(lr.asymmetry) < 0.02
        assert lr.f_hi == pytest.approx(f_inj_for_psi(max_psi(eps)), abs=2e4)

    def test_extended_flat_matches_classic(self, flat_table):
        classic = locking_range(flat_table, F_FR, 0.1, classic=True, tol_hz=1e4)
        extended = locking_range(flat_table, F_FR, 0.1, tol_hz=1e4)
        assert extended.f_lo == pytest.approx(classic.f_lo, abs=1e6)
        assert extended.f_hi == pytest.approx(classic.f_hi, abs=1e6)

    def test_vanishing_injection(self, flat_table):
        lr = locking_range(flat_table, F_FR, 1e-4, classic=True, tol_hz=1e3)
        assert lr.width < 10e6
        assert lr.f_lo <= lr.f_ref <= lr.f_hi

    def test_width_grows_with_epsilon(self, sloped_table):
        widths = [locking_range(sloped_table, F_FR, eps, tol_hz=1e5).width for eps in (0.05, 0.1, 0.2)]
        assert widths[0] < widths[1] < widths[2]

    def test_extended_range_brackets_reference(self, sloped_table):
        lr = locking_range(sloped_table, F_FR, 0.2, tol_hz=1e5)
        assert lr.f_lo < F_FR < lr.f_hi

    def test_epsilon_zero_rejected(self, flat_table):
        with pytest.raises(DomainError):
            locking_range(flat_table, F_FR, 0.0)

    def test_unlocked_trivial_point(self, flat_table, flat_params):
        # Phase balance broken by 30 deg: no lock even at f_inj = f_fr for small eps
        points = tuple(
            type(p)(p.f_fr, p.v_osc_fr, p.i_osc_fr, p.theta_vi_fr, p.theta_iv_fr + 30.0) for p in flat_table.points
        )
        broken = type(flat_table)(points=points, params=flat_params)
        with pytest.raises(ModelInconsistencyError):
            locking_range(broken, F_FR, 0.1, classic=True)

    def test_csv_round_trip(self, flat_table, tmp_path):
        ranges = [locking_range(flat_table, F_FR, eps, classic=True, tol_hz=1e4) for eps in (0.1, 0.2)]
        path = tmp_path / "ranges.csv"
        locking_ranges_frame(ranges).to_csv(path, index=False, float_format="%.17g")
        assert read_locking_range_csv(path) == ranges
