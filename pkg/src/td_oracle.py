"""
Behavioural time-domain model of a pseudo-differential CMOS ring oscillator.

The ring has N stages with 2N single-ended nodes. Node k belongs to stage
k % N and polarity k // N; its complement is (k + N) % 2N. Each node obeys

    C dV_k/dt = -Isat_m tanh(g_m V_prev(k) / Isat_m)
                - Isat_cc tanh(g_cc V_comp(k) / Isat_cc)
                - g_out V_k + I_inj,k(t)

where the single ring inversion is the polarity crossing between the last
stage and stage 0. Integration is fixed-step RK4 compiled with numba, so
identical configurations replay bit-for-bit.

Measured angles follow the stage-model conventions: theta_VI is the angle of
I_osc = I_gm + I_cs relative to the inverted stage input, theta_IV the
positive lag from I_t to the node voltage.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numba import njit
from tqdm import tqdm

from src.adler_solver import (
    FINJ_SEARCH_SPAN,
    InjectionSpec,
    LockingRange,
    LockOutcome,
    LockSolution,
    SweepMode,
    SweepRow,
    SweepTable,
    UnlockReason,
    Unlocked,
)
from src.errors import (
    DomainError,
    InsufficientWindowError,
    IntegrationError,
    MeasurementError,
    ModelInconsistencyError,
    NoOscillationError,
)
from src.phasor import Phasor, angle_between, phasor_add, wrap_angle
from src.stage_model import (
    CalibrationSample,
    FreeRunningPoint,
    KAngleMode,
    k_coefficient,
)

logger: logging.Logger = logging.getLogger(__name__)

SAMPLES_PER_PERIOD = 512
MIN_WINDOW_PERIODS = 16
MIN_MEASURE_PERIODS = 64
# Node voltage below which a record counts as decayed
OSCILLATION_FLOOR_V = 1e-4
# Fundamental at f_inj must carry this share of the node's peak-equivalent swing (DC included)
LOCK_MIN_FUNDAMENTAL_SHARE = 0.5
# ...and this share of the free-running amplitude when v_ref is known
LOCK_MIN_AMPLITUDE_SHARE = 0.5
# Injected calibration samples below this share of the free-running amplitude are dropped
COLLAPSE_SHARE = 0.5


def ring_topology(n_stages: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Driving-node and complement index arrays for the 2N ring nodes.

    Stage s > 0 is driven by stage s - 1 of the same polarity; stage 0 is
    driven by the last stage of the opposite polarity.
    """
    if n_stages < 2 or n_stages % 2:
        raise DomainError(f"N_stages must be even and >= 2, got {n_stages!r}")
    n_nodes = 2 * n_stages
    prev = np.empty(n_nodes, dtype=np.int64)
    comp = np.empty(n_nodes, dtype=np.int64)
    for k in range(n_nodes):
        s, p = k % n_stages, k // n_stages
        prev[k] = (s - 1) + p * n_stages if s > 0 else (n_stages - 1) + (1 - p) * n_stages
        comp[k] = (k + n_stages) % n_nodes
    return prev, comp


def node_phases(n_stages: int) -> np.ndarray:
    """Steady-state voltage angle of each node relative to node 0 (degrees)."""
    k = np.arange(2 * n_stages)
    s, p = k % n_stages, k // n_stages
    return np.array([wrap_angle(a) for a in s * (180.0 - 180.0 / n_stages) + 180.0 * p])


@dataclass(frozen=True)
class OracleConfig:
    """
    Behavioural ring parameters, injection and integration settings (SI units).

    epsilon = 0 disables injection. The injection amplitude is epsilon * i_ref,
    with i_ref the free-running fundamental |I_osc| (see resolve_injection_reference).
    v_ref, when known, is the free-running node amplitude; lock detection then
    rejects records whose fundamental fell well below it. multi_phase = False
    drives only the stage-0 node pair.
    """

    n_stages: int = 2
    c: float = 100e-15
    g_main: float = 12.72e-3
    i_sat_main: float = 1.699e-3
    g_cc: float = 11.40e-3
    i_sat_cc: float = 0.910e-3
    g_out: float = 2.784e-3
    epsilon: float = 0.0
    f_inj: Optional[float] = None
    inj_offsets: Optional[Tuple[float, ...]] = None
    multi_phase: bool = True
    i_ref: Optional[float] = None
    v_ref: Optional[float] = None
    f_nominal: float = 7e9
    dt: Optional[float] = None
    t_settle: float = 20e-9
    t_measure: float = 128 / 7e9
    seed: int = 0
    lock_block_periods: int = 8
    lock_max_rate: float = 0.5
    lock_max_total: float = 2.0

    def __post_init__(self):
        ring_topology(self.n_stages)
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 / (SAMPLES_PER_PERIOD * self.f_nominal))
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt!r}")
        if not self.c > 0:
            raise DomainError(f"C must be positive, got {self.c!r}")
        if min(self.i_sat_main, self.i_sat_cc) <= 0:
            raise DomainError("Saturation currents must be positive")
        if not self.g_out > 0:
            raise DomainError(f"g_out must be positive, got {self.g_out!r}")
        if min(self.g_main, self.g_cc) < 0:
            raise DomainError("Transconductances must be >= 0")
        if not 0.0 <= self.epsilon < 1.0:
            raise DomainError(f"Injection strength must satisfy 0 <= epsilon < 1, got {self.epsilon!r}")
        if self.t_settle < 0 or not self.t_measure > 0:
            raise DomainError("t_settle must be >= 0 and t_measure > 0")
        if self.injecting:
            if self.f_inj is None or not self.f_inj > 0:
                raise DomainError("Injection enabled without a positive f_inj")
            if self.t_measure * self.f_inj < MIN_MEASURE_PERIODS:
                raise DomainError(
                    f"t_measure covers {self.t_measure * self.f_inj:.1f} injection periods, "
                    f"need >= {MIN_MEASURE_PERIODS}"
                )
        if self.inj_offsets is not None:
            if len(self.inj_offsets) != 2 * self.n_stages:
                raise DomainError(f"Expected {2 * self.n_stages} injection offsets, got {len(self.inj_offsets)}")
            object.__setattr__(self, "inj_offsets", tuple(float(x) for x in self.inj_offsets))

    @property
    def injecting(self) -> bool:
        return self.epsilon > 0.0

    @property
    def offsets(self) -> np.ndarray:
        if self.inj_offsets is None:
            return node_phases(self.n_stages)
        return np.asarray(self.inj_offsets, dtype=float)

    @property
    def inj_gains(self) -> np.ndarray:
        """Per-node injection weight: every node, or only the stage-0 pair when single-phase."""
        gains = np.ones(2 * self.n_stages)
        if not self.multi_phase:
            gains[:] = 0.0
            gains[[0, self.n_stages]] = 1.0
        return gains

    def free_running(self) -> "OracleConfig":
        return replace(self, epsilon=0.0, f_inj=None)

    def injected(self, epsilon: float, f_inj: float) -> "OracleConfig":
        return replace(self, epsilon=epsilon, f_inj=f_inj)

    def with_injection(self, inj: InjectionSpec) -> "OracleConfig":
        return replace(self, epsilon=inj.epsilon, f_inj=inj.f_inj, multi_phase=inj.multi_phase)

    def with_capacitance(self, c: float) -> "OracleConfig":
        return replace(self, c=c)


@njit(cache=False)
def _node_currents(v, t, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains, out):
    for k in range(v.shape[0]):
        i = -isat_main * np.tanh(g_main * v[prev[k]] / isat_main)
        i -= isat_cc * np.tanh(g_cc * v[comp[k]] / isat_cc)
        i -= g_out * v[k]
        if inj_amp != 0.0:
            i += inj_amp * gains[k] * np.cos(omega * t + offsets[k])
        out[k] = i / c


@njit(cache=False)
def _rk4_kernel(v0, n_steps, store_from, dt, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains):
    n = v0.shape[0]
    out = np.empty((n_steps - store_from + 1, n))
    v = v0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    if store_from == 0:
        out[0, :] = v
    for step in range(n_steps):
        t = step * dt
        _node_currents(v, t, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains, k1)
        for j in range(n):
            tmp[j] = v[j] + 0.5 * dt * k1[j]
        _node_currents(tmp, t + 0.5 * dt, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains, k2)
        for j in range(n):
            tmp[j] = v[j] + 0.5 * dt * k2[j]
        _node_currents(tmp, t + 0.5 * dt, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains, k3)
        for j in range(n):
            tmp[j] = v[j] + dt * k3[j]
        _node_currents(tmp, t + dt, c, g_main, isat_main, g_cc, isat_cc, g_out, prev, comp, inj_amp, omega, offsets, gains, k4)
        for j in range(n):
            v[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not np.isfinite(v[j]):
                return out, step + 1
        if step + 1 >= store_from:
            out[step + 1 - store_from, :] = v
    return out, -1


@dataclass(frozen=True)
class WaveRecord:
    """Stored measurement window: node voltages and branch currents on a uniform grid."""

    t: np.ndarray
    v: np.ndarray
    i_main: np.ndarray
    i_cc: np.ndarray
    i_inj: np.ndarray
    i_total: np.ndarray
    dt: float
    n_stages: int

    def __post_init__(self):
        shape = (len(self.t), 2 * self.n_stages)
        for name in ("v", "i_main", "i_cc", "i_inj", "i_total"):
            if getattr(self, name).shape != shape:
                raise DomainError(f"WaveRecord.{name} has shape {getattr(self, name).shape}, expected {shape}")

    def signal(self, kind: str, node: int) -> np.ndarray:
        """Samples of one quantity at one node; i_osc and i_t are derived sums."""
        if kind == "i_osc":
            return self.i_main[:, node] + self.i_cc[:, node]
        if kind == "i_t":
            return self.i_main[:, node] + self.i_cc[:, node] + self.i_inj[:, node]
        if kind not in ("v", "i_main", "i_cc", "i_inj", "i_total"):
            raise DomainError(f"Unknown signal kind {kind!r}")
        return getattr(self, kind)[:, node]

    def to_frame(self) -> pd.DataFrame:
        columns = {"t_s": self.t}
        for prefix, data in (("v_node", self.v), ("i_main", self.i_main), ("i_cc", self.i_cc), ("i_inj", self.i_inj), ("i_total", self.i_total)):
            for k in range(data.shape[1]):
                columns[f"{prefix}{k}"] = data[:, k]
        return pd.DataFrame(columns)

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _initial_state(cfg: OracleConfig) -> np.ndarray:
    """Small antisymmetric start near the ring's own phase pattern, jittered by seed."""
    rng = np.random.default_rng(cfg.seed)
    jitter = 0.1 * rng.standard_normal(cfg.n_stages)
    base = np.cos(np.radians(node_phases(cfg.n_stages)[: cfg.n_stages])) + jitter
    half = 1e-2 * base
    return np.concatenate([half, -half])


def simulate(cfg: OracleConfig) -> WaveRecord:
    """
    Integrate the ring and return the measurement window.

    Raises:
        IntegrationError: The state became non-finite.
    """
    if cfg.injecting and cfg.i_ref is None:
        cfg = resolve_injection_reference(cfg)
    prev, comp = ring_topology(cfg.n_stages)
    n_settle = int(round(cfg.t_settle / cfg.dt))
    n_measure = int(round(cfg.t_measure / cfg.dt))
    n_steps = n_settle + n_measure
    inj_amp = cfg.epsilon * cfg.i_ref if cfg.injecting else 0.0
    omega = 2.0 * math.pi * cfg.f_inj if cfg.injecting else 0.0
    offsets = np.radians(cfg.offsets)
    gains = cfg.inj_gains
    logger.debug(
        f"simulate: C={cfg.c * 1e15:.3f} fF, eps={cfg.epsilon:.3f}, "
        f"f_inj={(cfg.f_inj or 0.0) / 1e9:.4f} GHz, {n_steps} steps"
    )
    v, failed = _rk4_kernel(
        _initial_state(cfg),
        n_steps,
        n_settle,
        cfg.dt,
        cfg.c,
        cfg.g_main,
        cfg.i_sat_main,
        cfg.g_cc,
        cfg.i_sat_cc,
        cfg.g_out,
        prev,
        comp,
        inj_amp,
        omega,
        offsets,
        gains,
    )
    if failed >= 0:
        raise IntegrationError("Non-finite node voltage", failed * cfg.dt)

    steps = np.arange(n_settle, n_steps + 1)
    t = steps * cfg.dt
    i_main = -cfg.i_sat_main * np.tanh(cfg.g_main * v[:, prev] / cfg.i_sat_main)
    i_cc = -cfg.i_sat_cc * np.tanh(cfg.g_cc * v[:, comp] / cfg.i_sat_cc)
    if cfg.injecting:
        i_inj = inj_amp * gains[None, :] * np.cos(omega * t[:, None] + offsets[None, :])
    else:
        i_inj = np.zeros_like(v)
    i_total = i_main + i_cc - cfg.g_out * v + i_inj
    return WaveRecord(t=t, v=v, i_main=i_main, i_cc=i_cc, i_inj=i_inj, i_total=i_total, dt=cfg.dt, n_stages=cfg.n_stages)


# ---------------------------------------------------------------------------
# Spectral measurements
# ---------------------------------------------------------------------------


def project_tone(t: np.ndarray, x: np.ndarray, f: float, t_ref: float) -> Phasor:
    """Least-squares cos/sin projection of x onto a tone at f, angle relative to cos(2*pi*f*(t - t_ref))."""
    arg = 2.0 * math.pi * f * (t - t_ref)
    basis = np.column_stack([np.cos(arg), np.sin(arg)])
    (a, b), *_ = np.linalg.lstsq(basis, x, rcond=None)
    return Phasor.from_complex(complex(a, -b))


def _window(rec: WaveRecord, f: float) -> slice:
    n_periods = int(math.floor(len(rec.t) * rec.dt * f + 1e-9))
    if n_periods < MIN_WINDOW_PERIODS:
        raise InsufficientWindowError(
            f"Window holds {n_periods} periods of {f / 1e9:.4f} GHz, need >= {MIN_WINDOW_PERIODS}"
        )
    n = int(round(n_periods / (f * rec.dt)))
    return slice(0, min(n, len(rec.t)))


def extract_fundamental(
    rec: WaveRecord, f: float, kind: str = "v", node: int = 0, t_ref: Optional[float] = None
) -> Phasor:
    """
    Fundamental phasor (peak amplitude) of one signal at frequency f.

    The window is truncated to an integer number of periods of f starting at
    the first stored sample, which is also the default angle reference.

    Raises:
        InsufficientWindowError: Fewer than 16 periods fit in the record.
    """
    if not f > 0:
        raise DomainError(f"Frequency must be positive, got {f!r}")
    win = _window(rec, f)
    t = rec.t[win]
    return project_tone(t, rec.signal(kind, node)[win], f, t[0] if t_ref is None else t_ref)


def harmonic_ratio(rec: WaveRecord, f: float, harmonic: int = 3, node: int = 0) -> float:
    """|V_h| / |V_1| of a node voltage."""
    fundamental = extract_fundamental(rec, f, "v", node)
    if fundamental.magnitude == 0.0:
        raise MeasurementError("Fundamental is zero; harmonic ratio undefined")
    return extract_fundamental(rec, harmonic * f, "v", node).magnitude / fundamental.magnitude


class LockStatus(NamedTuple):
    locked: bool
    drift_deg_per_period: float
    total_drift_deg: float


def detect_lock(rec: WaveRecord, f_inj: float, cfg: Optional[OracleConfig] = None, node: int = 0) -> LockStatus:
    """
    Judge lock from the phase of node voltage at f_inj over successive blocks.

    Phases are taken against absolute time so that a locked record shows a
    constant block phase. Ambiguous cases (too few blocks, weak fundamental)
    report unlocked, as do records latched to a DC level or quenched below
    half of cfg.v_ref.
    """
    cfg = cfg or OracleConfig()
    block_periods = cfg.lock_block_periods
    n_block = int(round(block_periods / (f_inj * rec.dt)))
    n_blocks = len(rec.t) // n_block if n_block > 0 else 0
    if n_blocks < 2:
        return LockStatus(False, math.inf, math.inf)

    x = rec.signal("v", node)
    phases = []
    for b in range(n_blocks):
        sl = slice(b * n_block, (b + 1) * n_block)
        phases.append(math.radians(project_tone(rec.t[sl], x[sl], f_inj, 0.0).angle))
    phases = np.degrees(np.unwrap(np.array(phases)))
    rates = np.abs(np.diff(phases)) / block_periods
    centres = (np.arange(n_blocks) + 0.5) * block_periods
    slope = np.polyfit(centres, phases, 1)[0]
    total = float(abs(slope) * n_blocks * block_periods)
    rate = float(rates.max())

    whole = project_tone(rec.t[: n_blocks * n_block], x[: n_blocks * n_block], f_inj, 0.0)
    swing = math.sqrt(2.0 * float(np.mean(x**2)))
    strong = swing > 0 and whole.magnitude >= LOCK_MIN_FUNDAMENTAL_SHARE * swing
    if cfg.v_ref is not None:
        strong = strong and whole.magnitude >= LOCK_MIN_AMPLITUDE_SHARE * cfg.v_ref
    locked = strong and rate < cfg.lock_max_rate and total < cfg.lock_max_total
    return LockStatus(bool(locked), rate, total)


class FrequencyEstimate(NamedTuple):
    f: float
    stderr: float


def _zero_crossing_frequency(rec: WaveRecord, c: Optional[float] = None, node: int = 0) -> FrequencyEstimate:
    x = rec.v[:, node]
    if float(np.max(np.abs(x))) < OSCILLATION_FLOOR_V:
        raise NoOscillationError("Record decayed below the oscillation floor", c)
    idx = np.nonzero((x[:-1] < 0.0) & (x[1:] >= 0.0))[0]
    if len(idx) < 3:
        raise NoOscillationError(f"Only {len(idx)} rising zero crossings in the window", c)
    frac = x[idx] / (x[idx] - x[idx + 1])
    crossings = rec.t[idx] + frac * rec.dt
    periods = np.diff(crossings)
    mean = float(np.mean(periods))
    stderr = float(np.std(periods, ddof=1) / math.sqrt(len(periods))) if len(periods) > 1 else 0.0
    return FrequencyEstimate(1.0 / mean, stderr / mean**2)


def free_running_frequency(cfg: OracleConfig) -> FrequencyEstimate:
    """
    Free-running frequency from the mean rising zero-crossing period of node 0.

    Raises:
        NoOscillationError: The record decayed or shows too few crossings.
    """
    rec = simulate(cfg.free_running())
    return _zero_crossing_frequency(rec, cfg.c)


def resolve_injection_reference(cfg: OracleConfig) -> OracleConfig:
    """Fill i_ref (and v_ref) from the measured free-running |I_osc| and |V_osc| when i_ref is unset."""
    if cfg.i_ref is not None:
        return cfg
    rec = simulate(cfg.free_running())
    f_fr = _zero_crossing_frequency(rec, cfg.c).f
    i_ref = extract_fundamental(rec, f_fr, "i_osc", 0).magnitude
    v_ref = extract_fundamental(rec, f_fr, "v", 0).magnitude
    logger.info(f"Injection reference |I_osc,fr| = {i_ref * 1e3:.4f} mA at C = {cfg.c * 1e15:.3f} fF")
    return replace(cfg, i_ref=i_ref, v_ref=cfg.v_ref if cfg.v_ref is not None else v_ref)


# ---------------------------------------------------------------------------
# Operating point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasuredPoint:
    """Measured operating point; per-stage angles from the polarity-0 nodes."""

    locked: bool
    f_osc: float
    theta_vi: Tuple[float, ...]
    theta_iv: Tuple[float, ...]
    psi_stages: Tuple[float, ...]
    v_osc: float
    i_gm: float
    i_cs: float
    i_osc: float
    i_t: float
    i_inj: float
    phi_0: float
    psi: float
    drift: float = 0.0

    def k(self, c: float) -> float:
        return k_coefficient(self.i_t, self.theta_iv[0], self.f_osc, self.v_osc, c)

    def to_free_running_point(self) -> FreeRunningPoint:
        return FreeRunningPoint(
            f_fr=self.f_osc,
            v_osc_fr=self.v_osc,
            i_osc_fr=self.i_osc,
            theta_vi_fr=self.theta_vi[0],
            theta_iv_fr=self.theta_iv[0],
        )

    def to_lock_outcome(self, f_fr: float) -> LockOutcome:
        if not self.locked:
            return Unlocked(UnlockReason.NO_ROOT, f"oracle drift {self.drift:.3f} deg/period")
        return LockSolution(
            phi_0=self.phi_0,
            psi=self.psi,
            theta_vi=self.theta_vi[0],
            i_t_mag=self.i_t,
            i_osc_mag=self.i_osc,
            v_osc_mag=self.v_osc,
            f_inj=self.f_osc,
            f_fr=f_fr,
            residual_norm=self.drift,
            theta_iv=self.theta_iv[0],
        )


def measure_operating_point(rec: WaveRecord, cfg: OracleConfig) -> MeasuredPoint:
    """
    Fundamental phasors of every stage and the derived angles.

    Raises:
        MeasurementError: Injection is on but the record is not locked.
    """
    if cfg.injecting:
        status = detect_lock(rec, cfg.f_inj, cfg)
        if not status.locked:
            raise MeasurementError(
                f"Record not locked at f_inj = {cfg.f_inj / 1e9:.4f} GHz (drift {status.drift_deg_per_period:.3f} deg/period)"
            )
        f, drift = cfg.f_inj, status.drift_deg_per_period
    else:
        f, drift = _zero_crossing_frequency(rec, cfg.c).f, 0.0

    prev, _ = ring_topology(cfg.n_stages)
    theta_vi, theta_iv, psi_stages = [], [], []
    first = None
    for s in range(cfg.n_stages):
        v_out = extract_fundamental(rec, f, "v", s)
        v_in = extract_fundamental(rec, f, "v", int(prev[s]))
        i_gm = extract_fundamental(rec, f, "i_main", s)
        i_cs = extract_fundamental(rec, f, "i_cc", s)
        i_inj = extract_fundamental(rec, f, "i_inj", s)
        i_osc = phasor_add(i_gm, i_cs)
        i_t = phasor_add(i_osc, i_inj)
        theta_vi.append(angle_between(i_osc, v_in.rotate(180.0)))
        theta_iv.append(angle_between(i_t, v_out))
        psi_stages.append(angle_between(i_t, i_osc))
        if first is None:
            first = (v_out, i_gm, i_cs, i_osc, i_t, i_inj)

    v_out, i_gm, i_cs, i_osc, i_t, i_inj = first
    phi_0 = angle_between(i_inj, i_osc) if i_inj.magnitude > 0 else 0.0
    return MeasuredPoint(
        locked=cfg.injecting,
        f_osc=f,
        theta_vi=tuple(theta_vi),
        theta_iv=tuple(theta_iv),
        psi_stages=tuple(psi_stages),
        v_osc=v_out.magnitude,
        i_gm=i_gm.magnitude,
        i_cs=i_cs.magnitude,
        i_osc=i_osc.magnitude,
        i_t=i_t.magnitude,
        i_inj=i_inj.magnitude,
        phi_0=phi_0,
        psi=psi_stages[0],
        drift=drift,
    )


def measure(cfg: OracleConfig) -> MeasuredPoint:
    """Simulate and measure; unlocked injected records give a point with locked=False."""
    rec = simulate(cfg)
    if cfg.injecting:
        status = detect_lock(rec, cfg.f_inj, cfg)
        if not status.locked:
            nan = math.nan
            return MeasuredPoint(
                False, cfg.f_inj, (nan,), (nan,), (nan,), nan, nan, nan, nan, nan, nan, nan, nan,
                status.drift_deg_per_period,
            )
    return measure_operating_point(rec, cfg)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def ring_phase_sum(point: MeasuredPoint, n_stages: int) -> float:
    """
    Round-trip phase error of the ring, wrapped to (-180, 180].

    Each stage shifts its input by 180 + theta_VI + psi - theta_IV; together
    with the single crossing inversion the ring must close on a multiple of 360.
    """
    total = 180.0 + sum(
        180.0 + tv + ps - ti for tv, ti, ps in zip(point.theta_vi, point.theta_iv, point.psi_stages)
    )
    if len(point.theta_vi) != n_stages:
        raise DomainError(f"Point carries {len(point.theta_vi)} stages, expected {n_stages}")
    return wrap_angle(total)


def multiphase_error(rec: WaveRecord, f: float) -> float:
    """Largest deviation (deg) of node voltage angles from the ideal ring progression."""
    ref = extract_fundamental(rec, f, "v", 0)
    expected = node_phases(rec.n_stages)
    errors = [
        abs(wrap_angle(angle_between(extract_fundamental(rec, f, "v", k), ref) - expected[k]))
        for k in range(2 * rec.n_stages)
    ]
    return max(errors)


def kcl_residual(rec: WaveRecord, c: float, every: int = 10) -> float:
    """
    Max |C dV/dt - sum of branch currents| over every tenth sample, relative to max |i_total|.

    dV/dt is a central difference of the stored voltages.
    """
    idx = np.arange(1, len(rec.t) - 1, every)
    dvdt = (rec.v[idx + 1] - rec.v[idx - 1]) / (2.0 * rec.dt)
    residual = np.abs(c * dvdt - rec.i_total[idx])
    scale = float(np.max(np.abs(rec.i_total)))
    if scale == 0.0:
        return 0.0
    return float(residual.max() / scale)


# ---------------------------------------------------------------------------
# Sweeps and calibration
# ---------------------------------------------------------------------------


def c_for_frequency(cfg: OracleConfig, f_ref: float, f_target: float) -> float:
    """Load capacitance giving f_target, using the exact 1/C scaling of the ring."""
    return cfg.c * f_ref / f_target


class CalibrationRun(NamedTuple):
    points: List[FreeRunningPoint]
    samples: List[CalibrationSample]
    measured: List[MeasuredPoint]


def _free_running_at(cfg: OracleConfig, c: float) -> MeasuredPoint:
    point_cfg = cfg.free_running().with_capacitance(c)
    return measure_operating_point(simulate(point_cfg), point_cfg)


def _sample(point: MeasuredPoint, f_fr: float, c: float) -> CalibrationSample:
    # Refer the measured angle back to the free-running frequency
    return CalibrationSample(
        v_in_amp=point.v_osc,
        theta_vi=point.theta_vi[0] * f_fr / point.f_osc,
        i_osc_amp=point.i_osc,
        f=point.f_osc,
        c=c,
    )


def calibration_sweep(
    cfg: OracleConfig,
    c_grid: Sequence[float],
    epsilons: Sequence[float] = (0.05, 0.10, 0.15, 0.20),
    offsets: Sequence[float] = (0.0,),
    workers: int = 1,
) -> CalibrationRun:
    """
    Free-running C-sweep plus injected samples at the reference C.

    The C-sweep yields the baseline table. It is exactly time-scaled, so the
    amplitude laws are fitted on locked points at cfg.c with injection
    strengths epsilons and relative frequency offsets offsets. Injected points
    that lose lock or whose amplitude falls below half of the free-running
    value are dropped.

    Raises:
        NoOscillationError: A grid point does not oscillate.
    """
    if len(c_grid) == 0:
        raise DomainError("Calibration C grid is empty")
    run_fr = partial(_free_running_at, cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            measured = list(tqdm(pool.map(run_fr, c_grid), total=len(c_grid), desc="Calibration", disable=None))
    else:
        measured = [run_fr(c) for c in tqdm(c_grid, desc="Calibration", unit="C", disable=None)]

    points = [m.to_free_running_point() for m in measured]
    samples = [_sample(m, m.f_osc, c) for m, c in zip(measured, c_grid)]
    order = np.argsort(c_grid)
    freqs = [points[i].f_fr for i in order]
    if any(b >= a for a, b in zip(freqs, freqs[1:])):
        logger.warning("Free-running frequency is not strictly decreasing in C")

    ref = _free_running_at(cfg, cfg.c)
    injected_cfg = replace(cfg, i_ref=ref.i_osc, v_ref=ref.v_osc)
    for eps in epsilons:
        for offset in offsets:
            point = measure(injected_cfg.injected(eps, ref.f_osc * (1.0 + offset)))
            if not point.locked:
                logger.warning(f"Calibration injection eps={eps:.3f}, offset={offset:+.3f} did not lock; skipped")
                continue
            if point.v_osc < COLLAPSE_SHARE * ref.v_osc or point.i_osc < COLLAPSE_SHARE * ref.i_osc:
                logger.warning(
                    f"Calibration injection eps={eps:.3f}, offset={offset:+.3f} collapsed "
                    f"(V={point.v_osc:.4f} V, I={point.i_osc * 1e3:.4f} mA); skipped"
                )
                continue
            samples.append(_sample(point, ref.f_osc, cfg.c))
    logger.info(f"Calibration: {len(points)} free-running points, {len(samples)} samples")
    return CalibrationRun(points, samples, measured)


def _oracle_point(cfg: OracleConfig, mode: SweepMode, fixed_hz: float, f_ref: float, epsilon: float, value: float) -> LockOutcome:
    if mode is SweepMode.SWEEP_FFR:
        f_fr, f_inj = value, fixed_hz
    else:
        f_fr, f_inj = fixed_hz, value
    # Low injection frequencies get a longer window so every point holds MIN_MEASURE_PERIODS
    t_measure = max(cfg.t_measure, (MIN_MEASURE_PERIODS + 1) / f_inj)
    point_cfg = replace(cfg, c=c_for_frequency(cfg, f_ref, f_fr), epsilon=epsilon, f_inj=f_inj, t_measure=t_measure)
    return measure(point_cfg).to_lock_outcome(f_fr)


def oracle_sweep(
    cfg: OracleConfig,
    mode: SweepMode,
    fixed_hz: float,
    epsilons: Sequence[float],
    grid: Sequence[float],
    f_ref: Optional[float] = None,
    workers: int = 1,
) -> SweepTable:
    """Measured counterpart of the solver sweeps on the same grid."""
    if len(grid) == 0:
        raise DomainError("Sweep grid is empty")
    cfg = resolve_injection_reference(cfg)
    f_ref = free_running_frequency(cfg).f if f_ref is None else f_ref
    grid = sorted(float(g) for g in grid)
    rows: List[SweepRow] = []
    for eps in epsilons:
        run = partial(_oracle_point, cfg, mode, fixed_hz, f_ref, eps)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(run, grid))
        else:
            outcomes = [run(g) for g in tqdm(grid, desc=f"Oracle eps={eps:.2f}", disable=None)]
        rows.extend(SweepRow(g, eps, o) for g, o in zip(grid, outcomes))
    return SweepTable(tuple(rows), mode, fixed_hz, KAngleMode.USE_THETA_VI)


def oracle_locking_range(
    cfg: OracleConfig,
    epsilon: float,
    f_fixed: float,
    mode: SweepMode = SweepMode.SWEEP_FINJ,
    f_ref: Optional[float] = None,
    tol_hz: float = 1e6,
) -> LockingRange:
    """
    Lock/unlock bisection of both edges of the oracle locking range.

    Edges are searched within FINJ_SEARCH_SPAN times f_fixed.

    Raises:
        DomainError: epsilon not in (0, 1).
        ModelInconsistencyError: The ring does not lock at the centre point.
    """
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"Locking range needs 0 < epsilon < 1, got {epsilon!r}")
    cfg = resolve_injection_reference(cfg)
    f_ref = free_running_frequency(cfg).f if f_ref is None else f_ref
    mode = SweepMode(mode)

    def locked(value: float) -> bool:
        return _oracle_point(cfg, mode, f_fixed, f_ref, epsilon, value).locked

    if not locked(f_fixed):
        raise ModelInconsistencyError(
            f"Oracle does not lock at the centre point {f_fixed / 1e9:.4f} GHz (eps={epsilon:.3f})"
        )
    edges = []
    for bound in (FINJ_SEARCH_SPAN[0] * f_fixed, FINJ_SEARCH_SPAN[1] * f_fixed):
        edges.append(_bisect_edge(locked, f_fixed, bound, tol_hz))
    (f_lo, clipped_lo), (f_hi, clipped_hi) = edges
    return LockingRange(f_lo, f_hi, f_fixed, epsilon, mode, clipped_lo, clipped_hi)


def _bisect_edge(locked, centre: float, bound: float, tol_hz: float) -> Tuple[float, bool]:
    direction = 1.0 if bound > centre else -1.0
    inside = centre
    step = max(1e-2 * centre, 4.0 * tol_hz)
    while True:
        outside = centre + direction * step
        if direction * (outside - bound) >= 0:
            if locked(bound):
                return bound, True
            outside = bound
            break
        if not locked(outside):
            break
        inside = outside
        step *= 2.0
    with tqdm(desc="Edge bisection", disable=None) as bar:
        while abs(outside - inside) > tol_hz:
            mid = 0.5 * (inside + outside)
            if locked(mid):
                inside = mid
            else:
                outside = mid
            bar.update()
    return inside, False
