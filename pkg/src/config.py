"""
Run configuration: TOML file, strict validation, unit-suffixed quantities.

Physical values must carry a unit (``"7GHz"``, ``"100fF"``, ``"0.4V"``);
dimensionless values (injection strengths, tolerances, counts) are plain
numbers. Unknown keys anywhere in the file are rejected.
"""

import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConfigError
from src.stage_model import KAngleMode

logger: logging.Logger = logging.getLogger(__name__)

SI_PREFIXES = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "µ": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "M": 1e6,
    "G": 1e9,
}
UNITS = ("Hz", "F", "A", "V", "S", "s", "A/V")
# Conductance may be written either way
UNIT_ALIASES = {"S": ("S", "A/V"), "A/V": ("A/V", "S")}

_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def parse_quantity(text: Union[str, float, int], unit: str) -> float:
    """
    Parse a unit-suffixed scalar such as "7GHz" or "0.77mS" into SI units.

    Args:
        text: Quantity string; bare numbers are rejected.
        unit: Expected unit, one of Hz, F, A, V, S, s, A/V.

    Returns:
        The value in base SI units.

    Raises:
        ConfigError: Missing or wrong unit, unknown prefix, or malformed number.
    """
    if unit not in UNITS:
        raise ConfigError(f"Unknown unit {unit!r}")
    if not isinstance(text, str):
        raise ConfigError(f"Quantity {text!r} needs an explicit unit suffix ({unit})")
    raw = text.strip().replace(" ", "")
    for suffix in UNIT_ALIASES.get(unit, (unit,)):
        if raw.endswith(suffix):
            body = raw[: -len(suffix)]
            break
    else:
        raise ConfigError(f"Quantity {text!r} does not end with unit {unit!r}")
    scale = 1.0
    if body and body[-1] in SI_PREFIXES and not _NUMBER.match(body):
        scale = SI_PREFIXES[body[-1]]
        body = body[:-1]
    if not _NUMBER.match(body):
        raise ConfigError(f"Malformed quantity {text!r}")
    return float(body) * scale


def _quantity(unit: str):
    def validate(value: Any) -> float:
        try:
            return parse_quantity(value, unit)
        except ConfigError as e:
            raise ValueError(str(e)) from e

    return BeforeValidator(validate)


def _grid(unit: str):
    """Accept {start, stop, step} (inclusive stop) or an explicit list of quantities."""

    def validate(value: Any) -> Tuple[float, ...]:
        try:
            if isinstance(value, dict):
                if set(value) != {"start", "stop", "step"}:
                    raise ConfigError(f"Grid needs exactly start, stop, step; got {sorted(value)}")
                start, stop, step = (parse_quantity(value[k], unit) for k in ("start", "stop", "step"))
                if step <= 0 or stop < start:
                    raise ConfigError(f"Grid needs step > 0 and stop >= start, got {value}")
                n = int(round((stop - start) / step)) + 1
                return tuple(float(x) for x in start + step * np.arange(n))
            if isinstance(value, (list, tuple)):
                if not value:
                    raise ConfigError("Grid list is empty")
                return tuple(parse_quantity(v, unit) for v in value)
        except ConfigError as e:
            raise ValueError(str(e)) from e
        raise ValueError(f"Grid must be a table or a list, got {value!r}")

    return BeforeValidator(validate)


Frequency = Annotated[float, _quantity("Hz")]
Capacitance = Annotated[float, _quantity("F")]
Current = Annotated[float, _quantity("A")]
Conductance = Annotated[float, _quantity("S")]
Duration = Annotated[float, _quantity("s")]
FrequencyGrid = Annotated[Tuple[float, ...], _grid("Hz")]
CapacitanceGrid = Annotated[Tuple[float, ...], _grid("F")]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OracleSection(_Section):
    c: Capacitance
    g_main: Conductance
    i_sat_main: Current
    g_cc: Conductance
    i_sat_cc: Current
    g_out: Conductance
    f_nominal: Frequency = 7e9
    t_settle: Duration = 20e-9
    t_measure: Duration = 128 / 7e9
    i_ref: Optional[Current] = None
    c_grid: CapacitanceGrid
    cal_epsilons: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    cal_offsets: Tuple[float, ...] = (0.0,)
    lock_block_periods: int = Field(8, ge=2)
    lock_max_rate: float = Field(0.5, gt=0)
    lock_max_total: float = Field(2.0, gt=0)
    dump_waves: bool = False


class StageSection(_Section):
    n_stages: int = Field(2, ge=2)
    k_angle_mode: KAngleMode = KAngleMode.USE_THETA_VI

    @field_validator("n_stages")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError(f"n_stages must be even, got {v}")
        return v


class InjectionSection(_Section):
    epsilons: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    f_inj: Frequency = 7e9
    f_fr: Frequency = 7e9
    multi_phase: bool = True

    @field_validator("epsilons")
    @classmethod
    def _strengths(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v or any(not 0.0 <= e < 1.0 for e in v):
            raise ValueError(f"epsilons must be a non-empty list inside [0, 1), got {v}")
        return v


class SweepSection(_Section):
    ffr_grid: FrequencyGrid
    finj_grid: FrequencyGrid
    workers: int = Field(1, ge=1)


class SolverSection(_Section):
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    max_halvings: int = Field(8, ge=0)
    locking_tol: Frequency = 1e6


class CompareSection(_Section):
    phi0_rms_deg: float = 3.0
    psi_rms_deg: float = 2.0
    v_osc_rms_rel: float = 0.03
    i_t_rms_rel: float = 0.05
    edge_rel_width: float = 0.05
    # Thresholds above bind only these injection strengths
    threshold_epsilons: Tuple[float, ...] = (0.20,)


class RunConfig(_Section):
    oracle: OracleSection
    stage: StageSection = StageSection()
    injection: InjectionSection = InjectionSection()
    sweep: SweepSection
    solver: SolverSection = SolverSection()
    compare: CompareSection = CompareSection()
    out_dir: Path = Path("out")
    seed: int = 0
    verbosity: int = 0

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with CLI overrides applied; None values are ignored."""
        updates: Dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "k_angle_mode":
                updates["stage"] = self.stage.model_copy(update={"k_angle_mode": KAngleMode(value)})
            else:
                updates[key] = value
        return self.model_copy(update=updates)


def _format_errors(e: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]


def load_config(path: Path) -> RunConfig:
    """
    Read and validate a TOML run configuration.

    Raises:
        ConfigError: File missing, not valid TOML, or failing validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path} is not valid TOML: {e}") from e
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n  " + "\n  ".join(_format_errors(e))) from e
    logger.info(f"Loaded config {path}")
    return cfg
