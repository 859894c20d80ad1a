"""
Solver-versus-oracle agreement report.

Deviations are computed only over grid points locked in both tables. Angles
are compared as wrapped differences; magnitudes relative to the oracle.
Thresholds bind only the injection strengths listed in
CompareSection.threshold_epsilons; other strengths are reported without a
pass/fail verdict.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tabulate import tabulate

from src.adler_solver import LockingRange, SweepTable
from src.config import CompareSection
from src.errors import ComparisonError
from src.phasor import wrap_angle

logger: logging.Logger = logging.getLogger(__name__)

QUANTITIES = ("phi0", "psi", "v_osc", "i_t")
REPORT_COLUMNS = ["epsilon", "quantity", "n", "rms", "max_abs", "threshold", "passed"]
# Relative tolerance when matching grid coordinates read back from CSV
GRID_RTOL = 1e-9
EPSILON_ATOL = 1e-9


class QuantityStats(NamedTuple):
    n: int
    rms: float
    max_abs: float


class EdgeDeviation(NamedTuple):
    epsilon: float
    lo_hz: float
    hi_hz: float
    rel_width: float


@dataclass(frozen=True)
class CompareReport:
    stats: Dict[Tuple[float, str], QuantityStats]
    thresholds: Dict[str, float]
    edges: List[EdgeDeviation] = field(default_factory=list)
    edge_rel_limit: float = math.inf
    disjoint: Tuple[float, ...] = ()
    threshold_epsilons: Tuple[float, ...] = (0.20,)

    def binds(self, epsilon: float) -> bool:
        return any(math.isclose(epsilon, e, abs_tol=EPSILON_ATOL) for e in self.threshold_epsilons)

    @property
    def failures(self) -> List[str]:
        out = []
        for (eps, q), s in self.stats.items():
            if self.binds(eps) and s.n and s.rms > self.thresholds[q]:
                out.append(f"eps={eps:.3f} {q}: rms {s.rms:.4g} > {self.thresholds[q]:.4g}")
        for e in self.edges:
            if self.binds(e.epsilon) and e.rel_width > self.edge_rel_limit:
                out.append(f"eps={e.epsilon:.3f} edges: {e.rel_width:.3%} of width > {self.edge_rel_limit:.1%}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures and not self.disjoint

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for (eps, q), s in sorted(self.stats.items()):
            limit = self.thresholds[q] if self.binds(eps) else math.nan
            rows.append([eps, q, s.n, s.rms, s.max_abs, limit, bool(s.n == 0 or not s.rms > limit)])
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def render(self) -> str:
        text = tabulate(self.to_frame(), headers="keys", tablefmt="github", showindex=False, floatfmt=".4g")
        if self.edges:
            text += "\n\n" + tabulate(
                [[e.epsilon, e.lo_hz / 1e6, e.hi_hz / 1e6, f"{e.rel_width:.2%}"] for e in self.edges],
                headers=["epsilon", "d_lo [MHz]", "d_hi [MHz]", "rel. width"],
                tablefmt="github",
            )
        if self.disjoint:
            text += f"\n\nNo common locked points for eps = {', '.join(f'{e:.3f}' for e in self.disjoint)}"
        return text


def _thresholds(cfg: CompareSection) -> Dict[str, float]:
    return {
        "phi0": cfg.phi0_rms_deg,
        "psi": cfg.psi_rms_deg,
        "v_osc": cfg.v_osc_rms_rel,
        "i_t": cfg.i_t_rms_rel,
    }


def _stats(values: Sequence[float]) -> QuantityStats:
    if not values:
        return QuantityStats(0, math.nan, math.nan)
    arr = np.abs(np.asarray(values, dtype=float))
    return QuantityStats(len(arr), float(np.sqrt(np.mean(arr**2))), float(arr.max()))


def _check_grids(solver: SweepTable, oracle: SweepTable) -> None:
    if solver.swept != oracle.swept:
        raise ComparisonError(f"Sweep modes differ: {solver.swept.value} vs {oracle.swept.value}")
    a = [(r.epsilon, r.sweep_value) for r in solver.rows]
    b = [(r.epsilon, r.sweep_value) for r in oracle.rows]
    if len(a) != len(b) or not np.allclose(np.array(a), np.array(b), rtol=GRID_RTOL, atol=0.0):
        raise ComparisonError("Solver and oracle tables do not share the same grid")


def compare_tables(
    solver: SweepTable,
    oracle: SweepTable,
    cfg: Optional[CompareSection] = None,
    solver_ranges: Sequence[LockingRange] = (),
    oracle_ranges: Sequence[LockingRange] = (),
) -> CompareReport:
    """
    Per-quantity RMS and max deviation over the common locked band.

    Raises:
        ComparisonError: The two tables were not computed on the same grid.
    """
    cfg = cfg or CompareSection()
    _check_grids(solver, oracle)
    stats: Dict[Tuple[float, str], QuantityStats] = {}
    disjoint = []
    for eps in solver.epsilons:
        diffs: Dict[str, List[float]] = {q: [] for q in QUANTITIES}
        for s_row, o_row in zip(solver.block(eps), oracle.block(eps)):
            if not (s_row.locked and o_row.locked):
                continue
            s, o = s_row.outcome, o_row.outcome
            diffs["phi0"].append(wrap_angle(s.phi_0 - o.phi_0))
            diffs["psi"].append(wrap_angle(s.psi - o.psi))
            diffs["v_osc"].append((s.v_osc_mag - o.v_osc_mag) / o.v_osc_mag)
            diffs["i_t"].append((s.i_t_mag - o.i_t_mag) / o.i_t_mag)
        if not diffs["phi0"]:
            logger.warning(f"eps={eps:.3f}: solver and oracle locked bands are disjoint")
            disjoint.append(eps)
        for q in QUANTITIES:
            stats[(eps, q)] = _stats(diffs[q])
    edges = compare_locking_ranges(solver_ranges, oracle_ranges)
    return CompareReport(
        stats, _thresholds(cfg), edges, cfg.edge_rel_width, tuple(disjoint), tuple(cfg.threshold_epsilons)
    )


def compare_locking_ranges(
    solver_ranges: Sequence[LockingRange], oracle_ranges: Sequence[LockingRange]
) -> List[EdgeDeviation]:
    """Edge deviations for every epsilon present in both lists, relative to the oracle width."""
    by_eps = {r.epsilon: r for r in oracle_ranges}
    out = []
    for s in solver_ranges:
        o = by_eps.get(s.epsilon)
        if o is None:
            continue
        d_lo, d_hi = s.f_lo - o.f_lo, s.f_hi - o.f_hi
        rel = max(abs(d_lo), abs(d_hi)) / o.width if o.width > 0 else math.inf
        out.append(EdgeDeviation(s.epsilon, d_lo, d_hi, rel))
    return out
