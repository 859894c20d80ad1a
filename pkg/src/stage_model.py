"""
Single-stage ring oscillator model.

Captures the two affine amplitude laws of a calibrated stage

    theta_VI = A_VI * |V_in| + theta_VI,0
    |I_osc|  = G_m  * |V_in| + I_osc,0

the charging-delay coefficient k, the free-running baseline table and the
least-squares calibration that produces them from oracle measurements.

Sign convention: theta_VI is the angle of the combined stage current relative
to the main-inverter current (a small lag, around -5 degrees); theta_IV is the
current-to-voltage lag stored as a positive angle (around 85 degrees).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import DomainError, FitError, OutOfRangeError

logger: logging.Logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "f_fr_hz",
    "v_osc_fr_v",
    "i_osc_fr_a",
    "theta_vi_fr_deg",
    "theta_iv_fr_deg",
]
MIN_FIT_SAMPLES = 3
MIN_TABLE_POINTS = 3


class KAngleMode(str, Enum):
    """Which angle enters the frequency (constant-k) constraint."""

    USE_THETA_VI = "theta_vi"
    USE_THETA_IV = "theta_iv"


@dataclass(frozen=True)
class StageParams:
    """Calibrated single-stage model."""

    a_vi: float  # deg/V
    theta_vi_0: float  # deg
    g_m: float  # A/V
    i_osc_0: float  # A
    theta_iv: float  # deg, positive lag
    c_load: float  # F
    n_stages: int = 2
    k_angle_mode: KAngleMode = KAngleMode.USE_THETA_VI

    def __post_init__(self):
        if not self.c_load > 0:
            raise DomainError(f"C_load must be positive, got {self.c_load!r}")
        if self.n_stages < 2 or self.n_stages % 2:
            raise DomainError(f"N_stages must be even and >= 2, got {self.n_stages!r}")
        if self.g_m < 0:
            raise DomainError(f"G_m must be >= 0, got {self.g_m!r}")
        if not 0.0 < self.theta_iv < 90.0:
            raise DomainError(f"theta_IV must lie in (0, 90) degrees, got {self.theta_iv!r}")
        object.__setattr__(self, "k_angle_mode", KAngleMode(self.k_angle_mode))

    @property
    def stage_phase(self) -> float:
        """Phase each stage must contribute beyond inversion: 180/N degrees."""
        return 180.0 / self.n_stages

    def with_mode(self, mode: Union[KAngleMode, str]) -> "StageParams":
        return replace(self, k_angle_mode=KAngleMode(mode))

    def to_dict(self) -> Dict[str, Union[float, int, str]]:
        d = asdict(self)
        d["k_angle_mode"] = self.k_angle_mode.value
        return d


@dataclass(frozen=True)
class FreeRunningPoint:
    """Free-running operating point of the ring at one load capacitance."""

    f_fr: float
    v_osc_fr: float
    i_osc_fr: float
    theta_vi_fr: float
    theta_iv_fr: float

    def __post_init__(self):
        if min(self.f_fr, self.v_osc_fr, self.i_osc_fr) <= 0:
            raise DomainError(f"Free-running magnitudes must be positive: {self}")


@dataclass(frozen=True)
class CalibrationSample:
    """One (amplitude, angle, current) observation used to fit the laws."""

    v_in_amp: float
    theta_vi: float
    i_osc_amp: float
    f: float
    c: float

    def __post_init__(self):
        if not self.v_in_amp > 0:
            raise DomainError(f"Calibration sample needs V_in > 0, got {self.v_in_amp!r}")


class LawFit(NamedTuple):
    slope: float
    intercept: float
    rms: float
    r2: float


class LinearLawFit(NamedTuple):
    """Result of fitting both amplitude laws."""

    a_vi: float
    theta_vi_0: float
    g_m: float
    i_osc_0: float
    theta_vi_fit: LawFit
    i_osc_fit: LawFit


class LawValue(NamedTuple):
    value: float
    clamped: bool


def theta_vi_of_amplitude(p: StageParams, v_in: float) -> float:
    """theta_VI in degrees at input amplitude v_in (no wrapping)."""
    if v_in < 0:
        raise DomainError(f"Input amplitude must be >= 0, got {v_in!r}")
    return p.a_vi * v_in + p.theta_vi_0


def i_osc_of_amplitude(p: StageParams, v_in: float) -> LawValue:
    """
    Stage current amplitude at input amplitude v_in.

    The affine law can go negative when evaluated far outside the fitted range;
    the result is then clamped at zero and flagged instead of raising.
    """
    if v_in < 0:
        raise DomainError(f"Input amplitude must be >= 0, got {v_in!r}")
    value = p.g_m * v_in + p.i_osc_0
    if value < 0:
        logger.debug(f"I_osc law negative at V_in={v_in:.4g} V, clamped to 0")
        return LawValue(0.0, True)
    return LawValue(value, False)


def k_coefficient(i_t: float, theta_iv: float, f: float, v_osc: float, c: float) -> float:
    """
    Charging-delay coefficient k = I_t * theta_IV / (2 pi f V_osc C).

    Args:
        i_t: Total node current amplitude (A).
        theta_iv: Current-to-voltage lag (degrees).
        f: Oscillation frequency (Hz).
        v_osc: Node voltage amplitude (V).
        c: Node load capacitance (F).
    """
    args = {"i_t": i_t, "theta_iv": theta_iv, "f": f, "v_osc": v_osc, "c": c}
    bad = [name for name, value in args.items() if not value > 0]
    if bad:
        raise DomainError(f"k_coefficient requires positive arguments, offending: {', '.join(bad)}")
    return i_t * math.radians(theta_iv) / (2.0 * math.pi * f * v_osc * c)


def _fit_line(x: np.ndarray, y: np.ndarray) -> LawFit:
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 2:
        raise FitError("Rank-deficient calibration design (all V_in equal)")
    residual = y - (slope * x + intercept)
    rms = float(np.sqrt(np.mean(residual**2)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residual**2)) / ss_tot if ss_tot > 0 else 1.0
    return LawFit(float(slope), float(intercept), rms, r2)


def fit_linear_laws(samples: Sequence[CalibrationSample]) -> LinearLawFit:
    """
    Ordinary least-squares fit of both amplitude laws.

    Args:
        samples: At least three samples with distinct input amplitudes.

    Returns:
        Slopes, intercepts and per-law RMS residual and R^2.

    Raises:
        FitError: Too few samples or all input amplitudes equal.
    """
    if len(samples) < MIN_FIT_SAMPLES:
        raise FitError(f"Need at least {MIN_FIT_SAMPLES} samples, got {len(samples)}")
    v = np.array([s.v_in_amp for s in samples], dtype=float)
    if np.ptp(v) == 0.0:
        raise FitError("Rank-deficient calibration design (all V_in equal)")
    theta_fit = _fit_line(v, np.array([s.theta_vi for s in samples], dtype=float))
    i_fit = _fit_line(v, np.array([s.i_osc_amp for s in samples], dtype=float))
    logger.info(
        f"Fitted A_VI={theta_fit.slope:.4g} deg/V (R2={theta_fit.r2:.4f}), "
        f"G_m={i_fit.slope:.4g} A/V (R2={i_fit.r2:.4f})"
    )
    return LinearLawFit(
        theta_fit.slope, theta_fit.intercept, i_fit.slope, i_fit.intercept, theta_fit, i_fit
    )


@dataclass(frozen=True)
class CalibrationTable:
    """Free-running baselines keyed by f_fr plus the fitted stage model."""

    points: Tuple[FreeRunningPoint, ...]
    params: StageParams
    fit_residuals: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        points = tuple(sorted(self.points, key=lambda p: p.f_fr))
        if len(points) < MIN_TABLE_POINTS:
            raise DomainError(f"Calibration table needs >= {MIN_TABLE_POINTS} points, got {len(points)}")
        freqs = [p.f_fr for p in points]
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise DomainError("Calibration table frequencies must be strictly increasing")
        object.__setattr__(self, "points", points)

    @property
    def f_min(self) -> float:
        return self.points[0].f_fr

    @property
    def f_max(self) -> float:
        return self.points[-1].f_fr

    def contains(self, f_fr: float) -> bool:
        return self.f_min <= f_fr <= self.f_max

    def with_params(self, params: StageParams) -> "CalibrationTable":
        return replace(self, params=params)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                [p.f_fr, p.v_osc_fr, p.i_osc_fr, p.theta_vi_fr, p.theta_iv_fr]
                for p in self.points
            ],
            columns=TABLE_COLUMNS,
        )

    def save(self, csv_path: Path, params_path: Path) -> None:
        """Write the baseline CSV and the JSON sidecar holding the fitted params."""
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        sidecar = {"params": self.params.to_dict(), "fit_residuals": self.fit_residuals}
        with open(params_path, "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2)
        logger.info(f"Saved calibration table ({len(self.points)} points) to {csv_path}")

    @classmethod
    def load(cls, csv_path: Path, params_path: Path) -> "CalibrationTable":
        df = pd.read_csv(csv_path, float_precision="round_trip")
        missing = set(TABLE_COLUMNS) - set(df.columns)
        if missing:
            raise DomainError(f"{csv_path} is missing columns: {sorted(missing)}")
        with open(params_path, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        points = [
            FreeRunningPoint(
                f_fr=row.f_fr_hz,
                v_osc_fr=row.v_osc_fr_v,
                i_osc_fr=row.i_osc_fr_a,
                theta_vi_fr=row.theta_vi_fr_deg,
                theta_iv_fr=row.theta_iv_fr_deg,
            )
            for row in df.itertuples(index=False)
        ]
        return cls(
            points=tuple(points),
            params=StageParams(**sidecar["params"]),
            fit_residuals=sidecar.get("fit_residuals", {}),
        )


def build_calibration_table(
    points: Sequence[FreeRunningPoint],
    samples: Sequence[CalibrationSample],
    c_load: float,
    n_stages: int = 2,
    k_angle_mode: KAngleMode = KAngleMode.USE_THETA_VI,
) -> CalibrationTable:
    """Fit the amplitude laws and assemble a calibration table."""
    fit = fit_linear_laws(samples)
    if fit.g_m < 0:
        raise FitError(f"Fitted G_m is negative ({fit.g_m:.4g} A/V); amplitude law is non-physical")
    theta_iv = float(np.mean([p.theta_iv_fr for p in points]))
    params = StageParams(
        a_vi=fit.a_vi,
        theta_vi_0=fit.theta_vi_0,
        g_m=fit.g_m,
        i_osc_0=fit.i_osc_0,
        theta_iv=theta_iv,
        c_load=c_load,
        n_stages=n_stages,
        k_angle_mode=k_angle_mode,
    )
    residuals = {
        "theta_vi_rms_deg": fit.theta_vi_fit.rms,
        "theta_vi_r2": fit.theta_vi_fit.r2,
        "i_osc_rms_a": fit.i_osc_fit.rms,
        "i_osc_r2": fit.i_osc_fit.r2,
    }
    table = CalibrationTable(points=tuple(points), params=params, fit_residuals=residuals)
    for point in table.points:
        mismatch = abs(point.theta_vi_fr - theta_vi_of_amplitude(params, point.v_osc_fr))
        if mismatch > max(3.0 * fit.theta_vi_fit.rms, 1e-9):
            logger.warning(
                f"Baseline at {point.f_fr / 1e9:.3f} GHz deviates {mismatch:.3f} deg from the fitted theta_VI law"
            )
        closure = point.theta_iv_fr - point.theta_vi_fr - params.stage_phase
        if abs(closure) > 1.0:
            logger.warning(
                f"Free-running phase closure off by {closure:.3f} deg at {point.f_fr / 1e9:.3f} GHz"
            )
    return table


def baseline_at(table: CalibrationTable, f_fr: float) -> FreeRunningPoint:
    """
    Piecewise-linear free-running baseline at f_fr.

    Raises:
        OutOfRangeError: f_fr lies outside the tabulated band.
    """
    if not table.contains(f_fr):
        raise OutOfRangeError(
            f"f_fr = {f_fr / 1e9:.4f} GHz outside calibrated band "
            f"[{table.f_min / 1e9:.4f}, {table.f_max / 1e9:.4f}] GHz"
        )
    freqs = np.array([p.f_fr for p in table.points])
    for point in table.points:
        if point.f_fr == f_fr:
            return point

    def interp(values: List[float]) -> float:
        return float(np.interp(f_fr, freqs, np.asarray(values)))

    return FreeRunningPoint(
        f_fr=f_fr,
        v_osc_fr=interp([p.v_osc_fr for p in table.points]),
        i_osc_fr=interp([p.i_osc_fr for p in table.points]),
        theta_vi_fr=interp([p.theta_vi_fr for p in table.points]),
        theta_iv_fr=interp([p.theta_iv_fr for p in table.points]),
    )


def synthetic_table(
    params: StageParams,
    f_grid: Sequence[float],
    v_osc_fr: float,
    theta_vi_fr: Optional[float] = None,
) -> CalibrationTable:
    """
    Exactly consistent table for a given stage model (flat baseline).

    Every point sits on both amplitude laws and closes the free-running phase
    balance theta_IV - theta_VI = 180/N.
    """
    theta_vi = theta_vi_of_amplitude(params, v_osc_fr) if theta_vi_fr is None else theta_vi_fr
    i_osc = i_osc_of_amplitude(params, v_osc_fr).value
    points = tuple(
        FreeRunningPoint(
            f_fr=float(f),
            v_osc_fr=v_osc_fr,
            i_osc_fr=i_osc,
            theta_vi_fr=theta_vi,
            theta_iv_fr=theta_vi + params.stage_phase,
        )
        for f in f_grid
    )
    return CalibrationTable(points=points, params=params)
