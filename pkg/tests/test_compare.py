import math

import numpy as np
import pytest

from src.adler_solver import LockingRange, LockSolution, SweepMode, SweepRow, SweepTable, UnlockReason, Unlocked, sweep_finj
from src.compare import REPORT_COLUMNS, compare_locking_ranges, compare_tables
from src.config import CompareSection
from src.errors import ComparisonError
from src.stage_model import KAngleMode
from tests.conftest import F_FR

GRID = [6.8e9, 6.9e9, 7.0e9, 7.1e9, 7.2e9]


def solution(phi_0=0.0, psi=0.0, v=0.4, i_t=1e-3, f_inj=F_FR):
    return LockSolution(
        phi_0=phi_0,
        psi=psi,
        theta_vi=-45.0,
        i_t_mag=i_t,
        i_osc_mag=1e-3,
        v_osc_mag=v,
        f_inj=f_inj,
        f_fr=F_FR,
        residual_norm=0.0,
    )


def table(outcomes, grid=GRID, eps=0.1, mode=SweepMode.SWEEP_FINJ):
    rows = tuple(SweepRow(g, eps, o) for g, o in zip(grid, outcomes))
    return SweepTable(rows, mode, F_FR, KAngleMode.USE_THETA_VI)


def test_identical_tables():
    t = table([solution(phi_0=10.0 * i) for i in range(len(GRID))])
    report = compare_tables(t, t)
    assert report.passed
    for q in ("phi0", "psi", "v_osc", "i_t"):
        assert report.stats[(0.1, q)].rms == 0.0
        assert report.stats[(0.1, q)].n == len(GRID)


def test_solver_sweep_against_itself(flat_table):
    t = sweep_finj(flat_table, F_FR, [0.05, 0.2], None, np.linspace(6.5e9, 7.5e9, 11))
    report = compare_tables(t, t)
    assert report.passed
    assert list(report.to_frame().columns) == REPORT_COLUMNS
    assert len(report.to_frame()) == 8


def test_wrapped_angle_difference():
    a = table([solution(phi_0=179.0)] * len(GRID))
    b = table([solution(phi_0=-179.0)] * len(GRID))
    stats = compare_tables(a, b).stats[(0.1, "phi0")]
    assert stats.rms == pytest.approx(2.0)


def test_only_common_locked_points():
    unlocked = Unlocked(UnlockReason.NO_ROOT)
    a = table([unlocked, solution(), solution(v=0.44), solution(), unlocked])
    b = table([solution(v=1.0), solution(), solution(), unlocked, unlocked])
    report = compare_tables(a, b)
    s = report.stats[(0.1, "v_osc")]
    assert s.n == 2
    assert s.max_abs == pytest.approx(0.1)
    assert s.rms == pytest.approx(0.1 / math.sqrt(2))


def test_threshold_failure():
    a = table([solution(psi=3.0)] * len(GRID), eps=0.2)
    b = table([solution(psi=0.0)] * len(GRID), eps=0.2)
    report = compare_tables(a, b, CompareSection(psi_rms_deg=2.0))
    assert not report.passed
    assert any("psi" in f for f in report.failures)
    assert "psi" in report.render()


def test_thresholds_bind_only_listed_strengths():
    a = table([solution(psi=3.0)] * len(GRID), eps=0.1)
    b = table([solution(psi=0.0)] * len(GRID), eps=0.1)
    report = compare_tables(a, b, CompareSection(psi_rms_deg=2.0))
    assert report.passed
    assert report.stats[(0.1, "psi")].rms == pytest.approx(3.0)
    assert math.isnan(report.to_frame()["threshold"].iloc[0])

    scoped = compare_tables(a, b, CompareSection(psi_rms_deg=2.0, threshold_epsilons=(0.1, 0.2)))
    assert not scoped.passed


def test_disjoint_bands():
    unlocked = Unlocked(UnlockReason.NO_ROOT)
    a = table([solution(), solution(), unlocked, unlocked, unlocked])
    b = table([unlocked, unlocked, unlocked, solution(), solution()])
    report = compare_tables(a, b)
    assert report.disjoint == (0.1,)
    assert not report.passed
    assert report.stats[(0.1, "phi0")].n == 0


def test_grid_mismatch():
    a = table([solution()] * len(GRID))
    b = table([solution()] * len(GRID), grid=[g + 1e6 for g in GRID])
    with pytest.raises(ComparisonError):
        compare_tables(a, b)


def test_mode_mismatch():
    a = table([solution()] * len(GRID))
    b = table([solution()] * len(GRID), mode=SweepMode.SWEEP_FFR)
    with pytest.raises(ComparisonError):
        compare_tables(a, b)


def test_locking_range_edges():
    solver = [LockingRange(6.9e9, 7.2e9, F_FR, 0.1), LockingRange(6.5e9, 7.5e9, F_FR, 0.2)]
    oracle = [LockingRange(6.91e9, 7.19e9, F_FR, 0.1)]
    edges = compare_locking_ranges(solver, oracle)
    assert len(edges) == 1
    assert edges[0].lo_hz == pytest.approx(-1e7)
    assert edges[0].hi_hz == pytest.approx(1e7)
    assert edges[0].rel_width == pytest.approx(1e7 / 2.8e8)

    t = table([solution()] * len(GRID))
    report = compare_tables(t, t, CompareSection(edge_rel_width=0.01), solver, oracle)
    assert report.passed
    report = compare_tables(t, t, CompareSection(edge_rel_width=0.01, threshold_epsilons=(0.1,)), solver, oracle)
    assert not report.passed
