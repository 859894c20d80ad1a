"""
Classic and extended Adler solvers for injection-locked ring oscillators.

The classic system holds the oscillator amplitudes at their free-running
values; the extended system lets the node amplitude move and feeds it back
through the calibrated amplitude-to-phase (A_VI) and amplitude-to-amplitude
(G_m) laws. Both report angles in the frame where I_osc has angle 0, with
psi > 0 corresponding to f_inj > f_fr.

Internally the extended solver works in normalized units: voltages divided
by V_osc,fr, currents by I_osc,fr and angles in radians.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from tqdm import tqdm

from src.errors import DomainError, ModelInconsistencyError
from src.phasor import Phasor, phasor_add, phasor_from_polar, wrap_angle
from src.stage_model import (
    CalibrationTable,
    FreeRunningPoint,
    KAngleMode,
    StageParams,
    baseline_at,
    k_coefficient,
)

logger: logging.Logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "sweep_var_hz",
    "epsilon",
    "locked",
    "phi0_deg",
    "psi_deg",
    "theta_vi_deg",
    "i_t_a",
    "i_osc_a",
    "v_osc_v",
    "residual",
]
# Extra trailing column so unlocked rows keep their classification on disk
REASON_COLUMN = "reason"

# f_inj == f_fr test for the injection-free case
TRIVIAL_RATIO_TOL = 1e-12
FINJ_SEARCH_SPAN = (0.25, 2.0)


class UnlockReason(str, Enum):
    NO_ROOT = "NO_ROOT"
    AMPLITUDE_COLLAPSE = "AMPLITUDE_COLLAPSE"
    MAX_ITER = "MAX_ITER"


class SweepMode(str, Enum):
    SWEEP_FFR = "ffr"
    SWEEP_FINJ = "finj"


@dataclass(frozen=True)
class InjectionSpec:
    """
    Injection strength (relative to I_osc,fr), frequency and injection pattern.

    multi_phase means every node receives its own rotated copy of the reference.
    The phasor solvers describe only that case; the oracle can also run a
    single-phase pattern where only the stage-0 pair is driven.
    """

    epsilon: float
    f_inj: float
    multi_phase: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise DomainError(f"Injection strength must satisfy 0 <= epsilon < 1, got {self.epsilon!r}")
        if not self.f_inj > 0:
            raise DomainError(f"Injection frequency must be positive, got {self.f_inj!r}")


@dataclass(frozen=True)
class LockSolution:
    """Locked operating point; angles in degrees, I_osc-referenced frame."""

    phi_0: float
    psi: float
    theta_vi: float
    i_t_mag: float
    i_osc_mag: float
    v_osc_mag: float
    f_inj: float
    f_fr: float
    residual_norm: float
    theta_iv: float = math.nan

    locked = True

    @property
    def i_osc_phasor(self) -> Phasor:
        return phasor_from_polar(self.i_osc_mag, 0.0)

    @property
    def i_t_phasor(self) -> Phasor:
        return phasor_from_polar(self.i_t_mag, self.psi)

    def k(self, c: float) -> float:
        return k_coefficient(self.i_t_mag, self.theta_iv, self.f_inj, self.v_osc_mag, c)


@dataclass(frozen=True)
class Unlocked:
    reason: UnlockReason
    detail: str = ""

    locked = False


LockOutcome = Union[LockSolution, Unlocked]


class SolverSettings(NamedTuple):
    """Damped-Newton and grid-fallback parameters."""

    tol: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 8
    jac_step: float = 1e-6
    polish_steps: int = 3
    grid_v: int = 100
    grid_phi: int = 360
    v_span: Tuple[float, float] = (0.5, 1.5)


DEFAULT_SETTINGS = SolverSettings()


class _Context(NamedTuple):
    eps: float
    g_n: float  # G_m * V_fr / I_fr
    a_n: float  # A_VI * V_fr, degrees per unit normalized amplitude
    theta_fr: float
    theta_iv: float
    stage_phase: float
    ratio: float  # f_inj / f_fr
    mode: KAngleMode


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"Injection strength must satisfy 0 <= epsilon < 1, got {epsilon!r}")


def _check_injection(inj: InjectionSpec) -> None:
    _check_epsilon(inj.epsilon)
    if not inj.multi_phase:
        raise DomainError("The phasor model needs multi-phase injection (every stage driven)")


def triangle_psi(epsilon: float, phi_0_deg: float) -> float:
    """Angle (deg) of 1 + epsilon*exp(j*phi_0): the psi produced by a given phi_0."""
    phi = math.radians(phi_0_deg)
    return math.degrees(math.atan2(epsilon * math.sin(phi), 1.0 + epsilon * math.cos(phi)))


def max_psi(epsilon: float) -> float:
    """Geometric maximum of |psi| (deg), reached when I_t is orthogonal to I_inj."""
    return math.degrees(math.asin(epsilon))


def classic_required_psi(baseline: FreeRunningPoint, f_inj: float, p: StageParams) -> float:
    """Required psi (deg) with theta_VI scaled by f_inj/f_fr and amplitudes frozen."""
    theta_vi_inj = baseline.theta_vi_fr * f_inj / baseline.f_fr
    return baseline.theta_iv_fr - theta_vi_inj - p.stage_phase


def phi_0_for_psi(epsilon: float, psi_req: float) -> float:
    """Solve the triangle relation for phi_0 (deg) on the branch through phi_0 = 0."""
    edge = 90.0 + max_psi(epsilon)
    if psi_req >= max_psi(epsilon):
        return edge
    if psi_req <= -max_psi(epsilon):
        return -edge
    return brentq(
        lambda phi: triangle_psi(epsilon, phi) - psi_req,
        -edge,
        edge,
        xtol=1e-13,
        rtol=4 * np.finfo(float).eps,
        maxiter=200,
    )


def solve_classic(baseline: FreeRunningPoint, inj: InjectionSpec, p: StageParams) -> LockOutcome:
    """
    Classic Adler solution with amplitudes held at their free-running values.

    Returns Unlocked(NO_ROOT) when the required psi exceeds arcsin(epsilon).
    """
    _check_injection(inj)
    ratio = inj.f_inj / baseline.f_fr
    psi_req = classic_required_psi(baseline, inj.f_inj, p)
    if inj.epsilon == 0.0:
        if abs(ratio - 1.0) > TRIVIAL_RATIO_TOL:
            return Unlocked(UnlockReason.NO_ROOT, "no injection and f_inj != f_fr")
        return _free_running_solution(baseline, inj.f_inj)
    if abs(psi_req) > max_psi(inj.epsilon):
        return Unlocked(
            UnlockReason.NO_ROOT,
            f"required psi {psi_req:.4f} deg exceeds arcsin(eps) = {max_psi(inj.epsilon):.4f} deg",
        )
    phi_0 = phi_0_for_psi(inj.epsilon, psi_req)
    i_t = baseline.i_osc_fr * abs(1.0 + inj.epsilon * complex(math.cos(math.radians(phi_0)), math.sin(math.radians(phi_0))))
    return LockSolution(
        phi_0=wrap_angle(phi_0),
        psi=psi_req,
        theta_vi=baseline.theta_vi_fr * ratio,
        i_t_mag=i_t,
        i_osc_mag=baseline.i_osc_fr,
        v_osc_mag=baseline.v_osc_fr,
        f_inj=inj.f_inj,
        f_fr=baseline.f_fr,
        residual_norm=abs(math.radians(triangle_psi(inj.epsilon, phi_0) - psi_req)),
        theta_iv=baseline.theta_iv_fr,
    )


def _free_running_solution(baseline: FreeRunningPoint, f_inj: float) -> LockSolution:
    return LockSolution(
        phi_0=0.0,
        psi=0.0,
        theta_vi=baseline.theta_vi_fr,
        i_t_mag=baseline.i_osc_fr,
        i_osc_mag=baseline.i_osc_fr,
        v_osc_mag=baseline.v_osc_fr,
        f_inj=f_inj,
        f_fr=baseline.f_fr,
        residual_norm=0.0,
        theta_iv=baseline.theta_iv_fr,
    )


def _context(baseline: FreeRunningPoint, inj: InjectionSpec, p: StageParams) -> _Context:
    if p.k_angle_mode is KAngleMode.USE_THETA_VI and baseline.theta_vi_fr == 0.0:
        raise DomainError("USE_THETA_VI frequency constraint needs a non-zero free-running theta_VI")
    return _Context(
        eps=inj.epsilon,
        g_n=p.g_m * baseline.v_osc_fr / baseline.i_osc_fr,
        a_n=p.a_vi * baseline.v_osc_fr,
        theta_fr=baseline.theta_vi_fr,
        theta_iv=baseline.theta_iv_fr,
        stage_phase=p.stage_phase,
        ratio=inj.f_inj / baseline.f_fr,
        mode=p.k_angle_mode,
    )


def _state(v, phi, ctx: _Context):
    """Currents and angles for normalized amplitude v and phi_0 (radians); numpy-broadcasting."""
    i_osc = 1.0 + ctx.g_n * (v - 1.0)
    zr = i_osc + ctx.eps * np.cos(phi)
    zi = ctx.eps * np.sin(phi)
    i_t = np.hypot(zr, zi)
    psi = np.arctan2(zi, zr)
    theta_vi = ctx.theta_fr + ctx.a_n * (v - 1.0)
    return i_osc, i_t, psi, theta_vi


def _residuals(v, phi, ctx: _Context):
    """Phase-condition and frequency-constraint residuals."""
    _, i_t, psi, theta_vi = _state(v, phi, ctx)
    theta_vi_inj = theta_vi * ctx.ratio
    psi_req = np.radians(ctx.theta_iv - theta_vi_inj - ctx.stage_phase)
    r1 = np.remainder(psi - psi_req + np.pi, 2.0 * np.pi) - np.pi
    if ctx.mode is KAngleMode.USE_THETA_VI:
        r2 = 1.0 - i_t * theta_vi / (ctx.theta_fr * v)
    else:
        r2 = 1.0 - i_t / (v * ctx.ratio)
    return r1, r2


class _NewtonResult(NamedTuple):
    x: np.ndarray
    norm: float
    status: str  # converged | max_iter | stalled | collapse
    iterations: int


def _damped_newton(
    fun: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, settings: SolverSettings
) -> _NewtonResult:
    x = np.array(x0, dtype=float)
    r = fun(x)
    norm = float(np.linalg.norm(r))
    for it in range(settings.max_iter):
        if norm < settings.tol:
            x, norm = _polish(fun, x, r, norm, settings)
            return _NewtonResult(x, norm, "converged", it)
        step = _newton_step(fun, x, r, settings)
        if step is None:
            return _NewtonResult(x, norm, "stalled", it)
        lam = 1.0
        accepted = False
        collapsed = True
        for _ in range(settings.max_halvings + 1):
            x_try = x + lam * step
            if x_try[0] > 0:
                collapsed = False
                r_try = fun(x_try)
                norm_try = float(np.linalg.norm(r_try))
                if np.isfinite(norm_try) and norm_try < norm:
                    x, r, norm = x_try, r_try, norm_try
                    accepted = True
                    break
            lam *= 0.5
        if not accepted:
            return _NewtonResult(x, norm, "collapse" if collapsed else "stalled", it)
    if norm < settings.tol:
        x, norm = _polish(fun, x, r, norm, settings)
        return _NewtonResult(x, norm, "converged", settings.max_iter)
    return _NewtonResult(x, norm, "max_iter", settings.max_iter)


def _newton_step(fun, x: np.ndarray, r: np.ndarray, settings: SolverSettings) -> Optional[np.ndarray]:
    jac = np.empty((len(r), len(x)))
    for j in range(len(x)):
        h = settings.jac_step * max(abs(x[j]), 1.0)
        xh = x.copy()
        xh[j] += h
        jac[:, j] = (fun(xh) - r) / h
    try:
        step = np.linalg.solve(jac, -r)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _polish(fun, x, r, norm, settings: SolverSettings):
    """A few extra undamped steps once inside the tolerance; kept only if they help."""
    for _ in range(settings.polish_steps):
        step = _newton_step(fun, x, r, settings)
        if step is None:
            break
        x_try = x + step
        if x_try[0] <= 0:
            break
        r_try = fun(x_try)
        norm_try = float(np.linalg.norm(r_try))
        if not norm_try < norm:
            break
        x, r, norm = x_try, r_try, norm_try
    return x, norm


def _on_stable_branch(phi, psi) -> np.ndarray:
    beta = np.remainder(phi - psi + np.pi, 2.0 * np.pi) - np.pi
    return np.abs(beta) <= np.pi / 2 + 1e-9


def _grid_seed(ctx: _Context, settings: SolverSettings) -> Optional[np.ndarray]:
    v = np.linspace(settings.v_span[0], settings.v_span[1], settings.grid_v)
    phi = np.radians(np.linspace(-180.0, 180.0, settings.grid_phi + 1)[1:])
    vv, pp = np.meshgrid(v, phi, indexing="ij")
    r1, r2 = _residuals(vv, pp, ctx)
    i_osc, _, psi, _ = _state(vv, pp, ctx)
    norm = np.hypot(r1, r2)
    norm = np.where(_on_stable_branch(pp, psi) & (i_osc > 0) & np.isfinite(norm), norm, np.inf)
    if not np.isfinite(norm).any():
        return None
    idx = np.unravel_index(np.argmin(norm), norm.shape)
    return np.array([vv[idx], pp[idx]])


def _accept(x: np.ndarray, ctx: _Context) -> Optional[str]:
    """Reason a converged iterate is rejected, or None when it is a valid lock."""
    i_osc, _, psi, _ = _state(x[0], x[1], ctx)
    if x[0] <= 0 or i_osc <= 0:
        return "collapse"
    if not _on_stable_branch(x[1], psi):
        return "unstable"
    return None


def solve_extended(
    table: CalibrationTable,
    f_fr: float,
    inj: InjectionSpec,
    p: Optional[StageParams] = None,
    seed: Optional[Tuple[float, float]] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> LockOutcome:
    """
    Extended Adler solution with amplitude-to-phase conversion.

    Args:
        table: Calibration table supplying the free-running baseline at f_fr.
        f_fr: Free-running frequency (Hz), inside the table band.
        inj: Injection strength and frequency.
        p: Stage model; defaults to the table's fitted params.
        seed: Optional (V_osc in volts, phi_0 in degrees) starting point, used by
            continuation; standalone solves start from the classic solution.
        settings: Newton and grid-fallback parameters.

    Returns:
        LockSolution, or Unlocked with NO_ROOT / AMPLITUDE_COLLAPSE / MAX_ITER.
    """
    _check_injection(inj)
    p = table.params if p is None else p
    baseline = baseline_at(table, f_fr)
    if inj.epsilon == 0.0:
        return solve_classic(baseline, inj, p)
    ctx = _context(baseline, inj, p)

    def fun(x: np.ndarray) -> np.ndarray:
        return np.array(_residuals(x[0], x[1], ctx), dtype=float)

    if seed is not None:
        x0 = np.array([seed[0] / baseline.v_osc_fr, math.radians(seed[1])])
    else:
        classic = solve_classic(baseline, inj, p)
        if classic.locked:
            x0 = np.array([1.0, math.radians(classic.phi_0)])
        else:
            psi_req = classic_required_psi(baseline, inj.f_inj, p)
            x0 = np.array([1.0, math.copysign(math.pi / 2, psi_req)])

    result = _damped_newton(fun, x0, settings)
    if result.status == "converged" and _accept(result.x, ctx) is None:
        return _solution(result, ctx, baseline, inj)

    logger.debug(
        f"Newton from seed failed ({result.status}) at f_fr={f_fr / 1e9:.4f} GHz, "
        f"f_inj={inj.f_inj / 1e9:.4f} GHz; falling back to grid scan"
    )
    grid_x0 = _grid_seed(ctx, settings)
    if grid_x0 is None:
        return Unlocked(UnlockReason.NO_ROOT, "no admissible grid cell")
    result = _damped_newton(fun, grid_x0, settings)
    if result.status == "converged":
        rejection = _accept(result.x, ctx)
        if rejection is None:
            return _solution(result, ctx, baseline, inj)
        if rejection == "collapse":
            return Unlocked(UnlockReason.AMPLITUDE_COLLAPSE, "converged to non-positive amplitude")
        return Unlocked(UnlockReason.NO_ROOT, "only an unstable-branch root found")
    if result.status == "collapse":
        return Unlocked(UnlockReason.AMPLITUDE_COLLAPSE, "amplitude iterate reached zero")
    if result.status == "max_iter":
        return Unlocked(UnlockReason.MAX_ITER, f"no convergence in {settings.max_iter} iterations")
    return Unlocked(UnlockReason.NO_ROOT, f"residual stalled at {result.norm:.3e}")


def _solution(result: _NewtonResult, ctx: _Context, baseline: FreeRunningPoint, inj: InjectionSpec) -> LockSolution:
    v, phi = float(result.x[0]), float(result.x[1])
    i_osc, i_t, psi, theta_vi = _state(v, phi, ctx)
    return LockSolution(
        phi_0=wrap_angle(math.degrees(phi)),
        psi=wrap_angle(math.degrees(float(psi))),
        theta_vi=float(theta_vi) * ctx.ratio,
        i_t_mag=float(i_t) * baseline.i_osc_fr,
        i_osc_mag=float(i_osc) * baseline.i_osc_fr,
        v_osc_mag=v * baseline.v_osc_fr,
        f_inj=inj.f_inj,
        f_fr=baseline.f_fr,
        residual_norm=result.norm,
        theta_iv=baseline.theta_iv_fr,
    )


def check_solution(
    sol: LockSolution, epsilon: float, i_osc_fr: float, stage_phase: float, tol: float = 1e-8
) -> Tuple[float, float]:
    """
    Re-check the closure conditions of a solution independently of the solver.

    Returns:
        (phasor closure error relative to I_osc, phase-condition error in degrees).
    """
    i_inj = phasor_from_polar(epsilon * i_osc_fr, sol.phi_0)
    total = phasor_add(sol.i_osc_phasor, i_inj)
    closure = abs(total.to_complex() - sol.i_t_phasor.to_complex()) / sol.i_osc_mag
    phase = wrap_angle(sol.theta_vi + sol.psi - sol.theta_iv + stage_phase)
    if closure > tol or abs(phase) > math.degrees(tol):
        logger.warning(f"Solution closure off: closure={closure:.3e}, phase={phase:.3e} deg")
    return closure, phase


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    sweep_value: float
    epsilon: float
    outcome: LockOutcome

    @property
    def locked(self) -> bool:
        return self.outcome.locked


@dataclass(frozen=True)
class SweepTable:
    rows: Tuple[SweepRow, ...]
    swept: SweepMode
    fixed_hz: float
    k_angle_mode: KAngleMode
    classic: bool = False

    def __post_init__(self):
        rows = tuple(sorted(self.rows, key=lambda r: (r.epsilon, r.sweep_value)))
        object.__setattr__(self, "rows", rows)

    @property
    def epsilons(self) -> List[float]:
        return sorted({r.epsilon for r in self.rows})

    def block(self, epsilon: float) -> List[SweepRow]:
        return [r for r in self.rows if r.epsilon == epsilon]

    def locked_count(self, epsilon: float) -> int:
        return sum(r.locked for r in self.block(epsilon))

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            out = row.outcome
            record = {"sweep_var_hz": row.sweep_value, "epsilon": row.epsilon, "locked": int(out.locked)}
            if out.locked:
                record.update(
                    phi0_deg=out.phi_0,
                    psi_deg=out.psi,
                    theta_vi_deg=out.theta_vi,
                    i_t_a=out.i_t_mag,
                    i_osc_a=out.i_osc_mag,
                    v_osc_v=out.v_osc_mag,
                    residual=out.residual_norm,
                )
                record[REASON_COLUMN] = ""
            else:
                record[REASON_COLUMN] = out.reason.value
            records.append(record)
        return pd.DataFrame(records, columns=SWEEP_COLUMNS + [REASON_COLUMN])


def _coordinates(mode: SweepMode, fixed_hz: float, value: float) -> Tuple[float, float]:
    """(f_fr, f_inj) of a sweep point."""
    if mode is SweepMode.SWEEP_FFR:
        return value, fixed_hz
    return fixed_hz, value


def _solve_point(
    table: CalibrationTable,
    p: StageParams,
    mode: SweepMode,
    fixed_hz: float,
    epsilon: float,
    classic: bool,
    settings: SolverSettings,
    value: float,
    seed: Optional[Tuple[float, float]] = None,
) -> LockOutcome:
    f_fr, f_inj = _coordinates(mode, fixed_hz, value)
    inj = InjectionSpec(epsilon=epsilon, f_inj=f_inj)
    if classic:
        return solve_classic(baseline_at(table, f_fr), inj, p)
    return solve_extended(table, f_fr, inj, p, seed=seed, settings=settings)


def _continuation_pass(
    grid: Sequence[float], first: List[LockOutcome], solve: Callable[..., LockOutcome], fixed_hz: float
) -> List[LockOutcome]:
    """
    Walk outward from the point nearest the trivial lock and retry points the
    first pass left unlocked, seeded from the locked neighbour. Points already
    locked keep their standalone solution.
    """
    outcomes = list(first)
    locked_idx = [i for i, o in enumerate(outcomes) if o.locked]
    if not locked_idx:
        return outcomes
    anchor = min(locked_idx, key=lambda i: (abs(grid[i] - fixed_hz), i))
    for direction in (1, -1):
        prev = outcomes[anchor]
        i = anchor + direction
        while 0 <= i < len(grid):
            if prev.locked and not outcomes[i].locked:
                seeded = solve(grid[i], seed=(prev.v_osc_mag, prev.phi_0))
                if seeded.locked:
                    outcomes[i] = seeded
            prev = outcomes[i]
            i += direction
    return outcomes


def _sweep(
    table: CalibrationTable,
    mode: SweepMode,
    fixed_hz: float,
    epsilons: Sequence[float],
    p: Optional[StageParams],
    grid: Sequence[float],
    classic: bool = False,
    settings: SolverSettings = DEFAULT_SETTINGS,
    workers: int = 1,
) -> SweepTable:
    if len(grid) == 0:
        raise DomainError("Sweep grid is empty")
    if len(epsilons) == 0:
        raise DomainError("Sweep needs at least one injection strength")
    for eps in epsilons:
        _check_epsilon(eps)
    p = table.params if p is None else p
    grid = sorted(float(g) for g in grid)
    rows: List[SweepRow] = []
    for eps in tqdm(epsilons, desc=f"Sweep {mode.value}", unit="eps", disable=None):
        solve = partial(_solve_point, table, p, mode, fixed_hz, eps, classic, settings)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                first = list(pool.map(solve, grid))
        else:
            first = [solve(value) for value in grid]
        outcomes = first if classic else _continuation_pass(grid, first, solve, fixed_hz)
        rows.extend(SweepRow(value, eps, out) for value, out in zip(grid, outcomes))
        logger.info(f"eps={eps:.3f}: {sum(o.locked for o in outcomes)}/{len(grid)} points locked")
    return SweepTable(tuple(rows), mode, fixed_hz, p.k_angle_mode, classic)


def sweep_ffr(
    table: CalibrationTable,
    f_inj: float,
    epsilons: Sequence[float],
    p: Optional[StageParams],
    grid: Sequence[float],
    **kwargs,
) -> SweepTable:
    """Fixed injection frequency, free-running frequency swept over grid."""
    return _sweep(table, SweepMode.SWEEP_FFR, f_inj, epsilons, p, grid, **kwargs)


def sweep_finj(
    table: CalibrationTable,
    f_fr: float,
    epsilons: Sequence[float],
    p: Optional[StageParams],
    grid: Sequence[float],
    **kwargs,
) -> SweepTable:
    """Fixed free-running frequency, injection frequency swept over grid."""
    return _sweep(table, SweepMode.SWEEP_FINJ, f_fr, epsilons, p, grid, **kwargs)


def k_along_sweep(sweep: SweepTable, epsilon: float, c: float) -> List[Tuple[float, float]]:
    """(sweep value, k) for every locked row of one injection strength."""
    return [(row.sweep_value, row.outcome.k(c)) for row in sweep.block(epsilon) if row.locked]


# ---------------------------------------------------------------------------
# Locking range
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LockingRange:
    f_lo: float
    f_hi: float
    f_ref: float
    epsilon: float = math.nan
    mode: SweepMode = SweepMode.SWEEP_FINJ
    clipped_lo: bool = False
    clipped_hi: bool = False

    def __post_init__(self):
        if not self.f_lo <= self.f_ref <= self.f_hi:
            raise DomainError(f"Locking range must bracket f_ref: {self}")

    @property
    def width(self) -> float:
        return self.f_hi - self.f_lo

    @property
    def asymmetry(self) -> float:
        if self.width == 0:
            return 0.0
        return ((self.f_hi - self.f_ref) - (self.f_ref - self.f_lo)) / self.width


def _search_bounds(table: CalibrationTable, mode: SweepMode, f_fixed: float) -> Tuple[float, float]:
    if mode is SweepMode.SWEEP_FFR:
        return table.f_min, table.f_max
    return FINJ_SEARCH_SPAN[0] * f_fixed, FINJ_SEARCH_SPAN[1] * f_fixed


def locking_range(
    table: CalibrationTable,
    f_fixed: float,
    epsilon: float,
    p: Optional[StageParams] = None,
    mode: SweepMode = SweepMode.SWEEP_FINJ,
    classic: bool = False,
    tol_hz: float = 1e6,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> LockingRange:
    """
    Maximal contiguous locked interval around the trivial point f_inj = f_fr.

    Edges are found by outward stepping followed by bisection on solver
    feasibility, to tol_hz absolute.

    Raises:
        DomainError: epsilon not in (0, 1).
        ModelInconsistencyError: the trivial point itself is unlocked.
    """
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"Locking range needs 0 < epsilon < 1, got {epsilon!r}")
    p = table.params if p is None else p
    mode = SweepMode(mode)
    solve = partial(_solve_point, table, p, mode, f_fixed, epsilon, classic, settings)

    centre = solve(f_fixed)
    if not centre.locked:
        raise ModelInconsistencyError(
            f"Trivial lock point f_inj = f_fr = {f_fixed / 1e9:.4f} GHz is unlocked ({centre.reason.value})"
        )
    lo_bound, hi_bound = _search_bounds(table, mode, f_fixed)
    edges = []
    for bound in (lo_bound, hi_bound):
        edges.append(_find_edge(solve, f_fixed, centre, bound, tol_hz, classic))
    (f_lo, clipped_lo), (f_hi, clipped_hi) = edges
    for clipped, side in ((clipped_lo, "low"), (clipped_hi, "high")):
        if clipped:
            logger.warning(f"eps={epsilon:.3f}: {side} locking edge reached the search bound")
    return LockingRange(f_lo, f_hi, f_fixed, epsilon, mode, clipped_lo, clipped_hi)


def _find_edge(
    solve: Callable[..., LockOutcome],
    centre_hz: float,
    centre: LockSolution,
    bound: float,
    tol_hz: float,
    classic: bool,
) -> Tuple[float, bool]:
    direction = 1.0 if bound > centre_hz else -1.0
    inside, last = centre_hz, centre

    def feasible(x: float) -> LockOutcome:
        if classic or not last.locked:
            return solve(x)
        return solve(x, seed=(last.v_osc_mag, last.phi_0))

    step = max(1e-3 * centre_hz, 4.0 * tol_hz)
    while True:
        outside = centre_hz + direction * step
        if direction * (outside - bound) >= 0:
            outcome = feasible(bound)
            if outcome.locked:
                return bound, True
            outside = bound
            break
        outcome = feasible(outside)
        if not outcome.locked:
            break
        inside, last = outside, outcome
        step *= 2.0
    while abs(outside - inside) > tol_hz:
        mid = 0.5 * (inside + outside)
        outcome = feasible(mid)
        if outcome.locked:
            inside, last = mid, outcome
        else:
            outside = mid
    return inside, False


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_sweep_csv(sweep: SweepTable, path: Path, source: Optional[str] = None) -> None:
    """Write a sweep table; a JSON sidecar (<name>.meta.json) keeps the sweep metadata."""
    path.parent.mkdir(parents=True, exist_ok=True)
    df = sweep.to_frame()
    if source is not None:
        df["source"] = source
    df.to_csv(path, index=False, float_format="%.17g")
    meta = {
        "swept": sweep.swept.value,
        "fixed_hz": sweep.fixed_hz,
        "k_angle_mode": sweep.k_angle_mode.value,
        "classic": sweep.classic,
    }
    with open(_meta_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def read_sweep_csv(path: Path, source: Optional[str] = None) -> SweepTable:
    """Read a sweep CSV written by write_sweep_csv (optionally one source of a joined table)."""
    df = pd.read_csv(path, float_precision="round_trip", keep_default_na=True)
    if source is not None and "source" in df.columns:
        df = df[df["source"] == source]
    with open(_meta_path(path), "r", encoding="utf-8") as f:
        meta = json.load(f)
    swept = SweepMode(meta["swept"])
    fixed = float(meta["fixed_hz"])
    rows = []
    for rec in df.to_dict(orient="records"):
        f_fr, f_inj = _coordinates(swept, fixed, rec["sweep_var_hz"])
        if int(rec["locked"]):
            outcome: LockOutcome = LockSolution(
                phi_0=rec["phi0_deg"],
                psi=rec["psi_deg"],
                theta_vi=rec["theta_vi_deg"],
                i_t_mag=rec["i_t_a"],
                i_osc_mag=rec["i_osc_a"],
                v_osc_mag=rec["v_osc_v"],
                f_inj=f_inj,
                f_fr=f_fr,
                residual_norm=rec["residual"],
            )
        else:
            reason = rec.get(REASON_COLUMN)
            reason = reason if isinstance(reason, str) and reason else UnlockReason.NO_ROOT.value
            outcome = Unlocked(UnlockReason(reason))
        rows.append(SweepRow(rec["sweep_var_hz"], rec["epsilon"], outcome))
    return SweepTable(tuple(rows), swept, fixed, KAngleMode(meta["k_angle_mode"]), bool(meta.get("classic", False)))


LOCKING_RANGE_COLUMNS = ["epsilon", "mode", "f_ref_hz", "f_lo_hz", "f_hi_hz", "width_hz", "asymmetry", "clipped_lo", "clipped_hi"]


def locking_ranges_frame(ranges: Iterable[LockingRange]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            [r.epsilon, r.mode.value, r.f_ref, r.f_lo, r.f_hi, r.width, r.asymmetry, int(r.clipped_lo), int(r.clipped_hi)]
            for r in ranges
        ],
        columns=LOCKING_RANGE_COLUMNS,
    )


def read_locking_range_csv(path: Path) -> List[LockingRange]:
    df = pd.read_csv(path, float_precision="round_trip")
    return [
        LockingRange(
            f_lo=rec["f_lo_hz"],
            f_hi=rec["f_hi_hz"],
            f_ref=rec["f_ref_hz"],
            epsilon=rec["epsilon"],
            mode=SweepMode(rec["mode"]),
            clipped_lo=bool(rec["clipped_lo"]),
            clipped_hi=bool(rec["clipped_hi"]),
        )
        for rec in df.to_dict(orient="records")
    ]
