"""
ILRO Lab command-line interface.

Workflows:
    calibrate       oracle C-sweep + law fit -> calibration table
    solve           one operating point (extended, or --classic)
    sweep           f_fr or f_inj sweep for every configured epsilon
    locking-range   locking-range edges per epsilon
    compare         solver vs oracle agreement report

Usage:
    python -m src.main --config configs/reference.toml --out out calibrate
    python -m src.main sweep --mode ffr --with-oracle

Exit codes: 0 success (unlocked results included), 1 run failure,
2 config error, 3 missing calibration or input table, 4 comparison failure.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import typer
from tabulate import tabulate

from src.adler_solver import (
    InjectionSpec,
    SolverSettings,
    SweepMode,
    SweepTable,
    k_along_sweep,
    locking_range,
    locking_ranges_frame,
    read_locking_range_csv,
    read_sweep_csv,
    solve_classic,
    solve_extended,
    sweep_ffr,
    sweep_finj,
    write_sweep_csv,
)
from src.compare import compare_tables
from src.config import RunConfig, load_config, parse_quantity
from src.errors import (
    ComparisonError,
    ConfigError,
    DomainError,
    FitError,
    IlroError,
    ModelInconsistencyError,
    NoOscillationError,
)
from src.stage_model import CalibrationTable, KAngleMode, baseline_at, build_calibration_table
from src.td_oracle import (
    OracleConfig,
    calibration_sweep,
    oracle_locking_range,
    oracle_sweep,
    simulate,
)
from src.utils.dependencies import DependencyManager
from src.utils.logging_setup import LOG_FILE_NAME, setup_environment, setup_logging

logger: logging.Logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_COMPARE = 4

DEFAULT_CONFIG = Path("configs/reference.toml")
TABLE_CSV = "table.csv"
PARAMS_JSON = "params.json"

# Figure panels a..d in order of decreasing injection strength
PANEL_EPSILONS = {0.20: "a", 0.15: "b", 0.10: "c", 0.05: "d"}
PHASE_FIGURES = {SweepMode.SWEEP_FFR: "fig10", SweepMode.SWEEP_FINJ: "fig12"}
MAGNITUDE_FIGURES = {SweepMode.SWEEP_FFR: "fig11", SweepMode.SWEEP_FINJ: "fig13"}

app = typer.Typer(help="Injection-locked ring oscillator lab.", no_args_is_help=True, add_completion=False)


@dataclass
class AppState:
    cfg: RunConfig
    dirs: Dict[str, Path]


def _fail(message: str, code: int) -> None:
    logger.error(message)
    typer.echo(f"Error: {message}", err=True)
    raise typer.Exit(code)


def oracle_config(cfg: RunConfig) -> OracleConfig:
    o = cfg.oracle
    return OracleConfig(
        n_stages=cfg.stage.n_stages,
        c=o.c,
        g_main=o.g_main,
        i_sat_main=o.i_sat_main,
        g_cc=o.g_cc,
        i_sat_cc=o.i_sat_cc,
        g_out=o.g_out,
        multi_phase=cfg.injection.multi_phase,
        i_ref=o.i_ref,
        f_nominal=o.f_nominal,
        t_settle=o.t_settle,
        t_measure=o.t_measure,
        seed=cfg.seed,
        lock_block_periods=o.lock_block_periods,
        lock_max_rate=o.lock_max_rate,
        lock_max_total=o.lock_max_total,
    )


def solver_settings(cfg: RunConfig) -> SolverSettings:
    return SolverSettings(tol=cfg.solver.tol, max_iter=cfg.solver.max_iter, max_halvings=cfg.solver.max_halvings)


def load_table(state: AppState) -> CalibrationTable:
    csv_path = state.dirs["calibration"] / TABLE_CSV
    params_path = state.dirs["calibration"] / PARAMS_JSON
    if not csv_path.is_file() or not params_path.is_file():
        _fail(f"Calibration files missing in {state.dirs['calibration']}; run 'calibrate' first", EXIT_MISSING)
    table = CalibrationTable.load(csv_path, params_path)
    return table.with_params(table.params.with_mode(state.cfg.stage.k_angle_mode))


def _frequency(text: Optional[str], default: float) -> float:
    if text is None:
        return default
    try:
        return parse_quantity(text, "Hz")
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)


@app.callback()
def main(
    ctx: typer.Context,
    config: Path = typer.Option(DEFAULT_CONFIG, "--config", help="TOML run configuration"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory (overrides config)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Oracle initial-condition seed"),
    k_angle: Optional[KAngleMode] = typer.Option(None, "--k-angle", help="Angle in the frequency constraint"),
    verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="-v info, -vv debug"),
):
    """Load the configuration and prepare the output directory."""
    try:
        cfg = load_config(config).with_overrides(out_dir=out, seed=seed, k_angle_mode=k_angle, verbosity=verbose)
    except ConfigError as e:
        typer.echo(f"Config error: {e}", err=True)
        raise typer.Exit(EXIT_CONFIG)
    dirs = setup_environment(cfg.out_dir)
    setup_logging(dirs["logs"] / LOG_FILE_NAME, cfg.verbosity)
    DependencyManager.log_environment()
    ctx.obj = AppState(cfg, dirs)


@app.command()
def calibrate(ctx: typer.Context):
    """Run the oracle calibration sweep and fit the stage laws."""
    state: AppState = ctx.obj
    cfg = state.cfg
    ocfg = oracle_config(cfg)
    logger.info(f"Calibrating over {len(cfg.oracle.c_grid)} capacitances")
    try:
        run = calibration_sweep(
            ocfg, cfg.oracle.c_grid, cfg.oracle.cal_epsilons, cfg.oracle.cal_offsets, workers=cfg.sweep.workers
        )
        table = build_calibration_table(
            run.points, run.samples, c_load=ocfg.c, n_stages=cfg.stage.n_stages, k_angle_mode=cfg.stage.k_angle_mode
        )
    except NoOscillationError as e:
        _fail(f"Calibration aborted: {e}", EXIT_FAILURE)
    except FitError as e:
        _fail(f"Law fit failed: {e}", EXIT_FAILURE)

    table.save(state.dirs["calibration"] / TABLE_CSV, state.dirs["calibration"] / PARAMS_JSON)
    fig3 = table.to_frame()[["f_fr_hz", "theta_vi_fr_deg", "theta_iv_fr_deg"]]
    fig3.to_csv(state.dirs["figures"] / "fig3.csv", index=False, float_format="%.17g")
    if cfg.oracle.dump_waves:
        simulate(ocfg.free_running()).write_csv(state.dirs["waves"] / "free_running.csv")

    p = table.params
    typer.echo(
        tabulate(
            [
                ["A_VI [deg/V]", p.a_vi, table.fit_residuals["theta_vi_r2"]],
                ["G_m [A/V]", p.g_m, table.fit_residuals["i_osc_r2"]],
            ],
            headers=["law", "slope", "R^2"],
            tablefmt="github",
            floatfmt=".5g",
        )
    )
    typer.echo(f"Band: {table.f_min / 1e9:.4f} - {table.f_max / 1e9:.4f} GHz, theta_IV = {p.theta_iv:.3f} deg")


def _outcome_record(f_fr: float, f_inj: float, epsilon: float, outcome) -> Dict[str, object]:
    record: Dict[str, object] = {"f_fr_hz": f_fr, "f_inj_hz": f_inj, "epsilon": epsilon, "locked": int(outcome.locked)}
    if outcome.locked:
        record.update(
            phi0_deg=outcome.phi_0,
            psi_deg=outcome.psi,
            theta_vi_deg=outcome.theta_vi,
            theta_iv_deg=outcome.theta_iv,
            i_t_a=outcome.i_t_mag,
            i_osc_a=outcome.i_osc_mag,
            v_osc_v=outcome.v_osc_mag,
            residual=outcome.residual_norm,
        )
    else:
        record["reason"] = outcome.reason.value
    return record


@app.command()
def solve(
    ctx: typer.Context,
    f_fr: Optional[str] = typer.Option(None, "--f-fr", help="Free-running frequency, e.g. 7GHz"),
    f_inj: Optional[str] = typer.Option(None, "--f-inj", help="Injection frequency, e.g. 7.1GHz"),
    epsilon: Optional[float] = typer.Option(None, "--epsilon", help="Injection strength |I_inj|/|I_osc,fr|"),
    classic: bool = typer.Option(False, "--classic", help="Classic Adler (amplitudes frozen)"),
):
    """Solve a single operating point."""
    state: AppState = ctx.obj
    cfg = state.cfg
    table = load_table(state)
    f_fr_hz = _frequency(f_fr, cfg.injection.f_fr)
    f_inj_hz = _frequency(f_inj, cfg.injection.f_inj)
    eps = cfg.injection.epsilons[-1] if epsilon is None else epsilon
    try:
        inj = InjectionSpec(epsilon=eps, f_inj=f_inj_hz, multi_phase=cfg.injection.multi_phase)
        if classic:
            outcome = solve_classic(baseline_at(table, f_fr_hz), inj, table.params)
        else:
            outcome = solve_extended(table, f_fr_hz, inj, table.params, settings=solver_settings(cfg))
    except DomainError as e:
        _fail(str(e), EXIT_CONFIG)

    record = _outcome_record(f_fr_hz, f_inj_hz, eps, outcome)
    typer.echo(tabulate(list(record.items()), headers=["field", "value"], tablefmt="github", floatfmt=".10g"))
    path = state.dirs["sweeps"] / "solve.csv"
    pd.DataFrame([record]).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {path}")


def _grid_for(state: AppState, mode: SweepMode, table: CalibrationTable) -> List[float]:
    cfg = state.cfg
    if mode is SweepMode.SWEEP_FINJ:
        return list(cfg.sweep.finj_grid)
    grid = [f for f in cfg.sweep.ffr_grid if table.contains(f)]
    dropped = len(cfg.sweep.ffr_grid) - len(grid)
    if dropped:
        logger.warning(f"{dropped} f_fr grid points lie outside the calibrated band and are skipped")
    if not grid:
        _fail("No f_fr grid point lies inside the calibrated band", EXIT_CONFIG)
    return grid


def _fixed_for(cfg: RunConfig, mode: SweepMode) -> float:
    return cfg.injection.f_inj if mode is SweepMode.SWEEP_FFR else cfg.injection.f_fr


def _figure_frames(solver: SweepTable, oracle: Optional[SweepTable], figures: Path) -> None:
    """One CSV per figure panel: phase quantities and magnitudes for each injection strength."""
    solver_df = solver.to_frame()
    oracle_df = oracle.to_frame() if oracle is not None else None
    for eps, panel in PANEL_EPSILONS.items():
        mask = (solver_df["epsilon"] - eps).abs() < 1e-12
        if not mask.any():
            continue
        for names, columns in (
            (PHASE_FIGURES, ["phi0_deg", "psi_deg"]),
            (MAGNITUDE_FIGURES, ["i_t_a", "v_osc_v"]),
        ):
            panel_df = solver_df.loc[mask, ["sweep_var_hz", "locked"] + columns].reset_index(drop=True)
            if oracle_df is not None:
                o = oracle_df.loc[(oracle_df["epsilon"] - eps).abs() < 1e-12, ["locked"] + columns]
                o = o.reset_index(drop=True).add_prefix("oracle_")
                panel_df = pd.concat([panel_df, o], axis=1)
            panel_df.to_csv(figures / f"{names[solver.swept]}{panel}.csv", index=False, float_format="%.17g")


def _write_joined(solver: SweepTable, oracle: SweepTable, path: Path) -> None:
    write_sweep_csv(solver, path, source="solver")
    joined = pd.concat(
        [solver.to_frame().assign(source="solver"), oracle.to_frame().assign(source="oracle")],
        ignore_index=True,
    )
    joined.to_csv(path, index=False, float_format="%.17g")


@app.command()
def sweep(
    ctx: typer.Context,
    mode: SweepMode = typer.Option(SweepMode.SWEEP_FFR, "--mode", help="ffr: sweep f_fr; finj: sweep f_inj"),
    with_oracle: bool = typer.Option(False, "--with-oracle", help="Also measure every grid point with the oracle"),
    classic: bool = typer.Option(False, "--classic", help="Classic Adler (amplitudes frozen)"),
):
    """Sweep one frequency for every configured injection strength."""
    state: AppState = ctx.obj
    cfg = state.cfg
    table = load_table(state)
    grid = _grid_for(state, mode, table)
    fixed = _fixed_for(cfg, mode)
    run = sweep_ffr if mode is SweepMode.SWEEP_FFR else sweep_finj
    try:
        result = run(
            table,
            fixed,
            cfg.injection.epsilons,
            table.params,
            grid,
            classic=classic,
            settings=solver_settings(cfg),
            workers=cfg.sweep.workers,
        )
    except DomainError as e:
        _fail(str(e), EXIT_CONFIG)

    suffix = "_classic" if classic else ""
    path = state.dirs["sweeps"] / f"sweep_{mode.value}{suffix}.csv"
    write_sweep_csv(result, path)
    k_rows = [
        [eps, value, k] for eps in result.epsilons for value, k in k_along_sweep(result, eps, table.params.c_load)
    ]
    pd.DataFrame(k_rows, columns=["epsilon", "sweep_var_hz", "k"]).to_csv(
        state.dirs["figures"] / f"k_{mode.value}{suffix}.csv", index=False, float_format="%.17g"
    )

    oracle = None
    if with_oracle:
        oracle = oracle_sweep(
            oracle_config(cfg), mode, fixed, cfg.injection.epsilons, grid, workers=cfg.sweep.workers
        )
        _write_joined(result, oracle, state.dirs["sweeps"] / f"joined_{mode.value}{suffix}.csv")
    _figure_frames(result, oracle, state.dirs["figures"])

    typer.echo(
        tabulate(
            [[eps, result.locked_count(eps), len(result.block(eps))] for eps in result.epsilons],
            headers=["epsilon", "locked", "points"],
            tablefmt="github",
        )
    )
    typer.echo(f"Wrote {path}")


@app.command("locking-range")
def locking_range_cmd(
    ctx: typer.Context,
    mode: SweepMode = typer.Option(SweepMode.SWEEP_FINJ, "--mode", help="Which frequency moves"),
    classic: bool = typer.Option(False, "--classic", help="Classic Adler (amplitudes frozen)"),
    with_oracle: bool = typer.Option(False, "--with-oracle", help="Also bisect the oracle edges"),
):
    """Locking-range edges, width and asymmetry per injection strength."""
    state: AppState = ctx.obj
    cfg = state.cfg
    table = load_table(state)
    fixed = _fixed_for(cfg, mode)
    epsilons = [e for e in cfg.injection.epsilons if e > 0]
    try:
        ranges = [
            locking_range(
                table,
                fixed,
                eps,
                table.params,
                mode,
                classic=classic,
                tol_hz=cfg.solver.locking_tol,
                settings=solver_settings(cfg),
            )
            for eps in epsilons
        ]
    except ModelInconsistencyError as e:
        _fail(str(e), EXIT_FAILURE)
    except DomainError as e:
        _fail(str(e), EXIT_CONFIG)

    suffix = "_classic" if classic else ""
    frame = locking_ranges_frame(ranges)
    frame.to_csv(state.dirs["locking"] / f"locking_{mode.value}{suffix}.csv", index=False, float_format="%.17g")
    if with_oracle:
        ocfg = oracle_config(cfg)
        try:
            oracle_ranges = [
                oracle_locking_range(ocfg, eps, fixed, mode, tol_hz=cfg.solver.locking_tol) for eps in epsilons
            ]
        except ModelInconsistencyError as e:
            _fail(str(e), EXIT_FAILURE)
        locking_ranges_frame(oracle_ranges).to_csv(
            state.dirs["locking"] / f"oracle_locking_{mode.value}.csv", index=False, float_format="%.17g"
        )
    typer.echo(tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=".6g"))


@app.command()
def compare(
    ctx: typer.Context,
    solver_csv: Path = typer.Argument(..., help="Solver sweep CSV, or a joined table"),
    oracle_csv: Optional[Path] = typer.Argument(None, help="Oracle sweep CSV (omit for a joined table)"),
    solver_ranges: Optional[Path] = typer.Option(None, "--solver-ranges", help="Solver locking-range CSV"),
    oracle_ranges: Optional[Path] = typer.Option(None, "--oracle-ranges", help="Oracle locking-range CSV"),
):
    """Compare solver and oracle tables over the common locked band."""
    state: AppState = ctx.obj
    inputs = [p for p in (solver_csv, oracle_csv, solver_ranges, oracle_ranges) if p is not None]
    missing = [str(p) for p in inputs if not p.is_file()]
    if missing:
        _fail(f"Missing input table(s): {', '.join(missing)}", EXIT_MISSING)
    try:
        if oracle_csv is None:
            solver = read_sweep_csv(solver_csv, source="solver")
            oracle = read_sweep_csv(solver_csv, source="oracle")
        else:
            solver = read_sweep_csv(solver_csv)
            oracle = read_sweep_csv(oracle_csv)
        report = compare_tables(
            solver,
            oracle,
            state.cfg.compare,
            read_locking_range_csv(solver_ranges) if solver_ranges else (),
            read_locking_range_csv(oracle_ranges) if oracle_ranges else (),
        )
    except FileNotFoundError as e:
        _fail(f"Missing sweep metadata: {e}", EXIT_MISSING)
    except ComparisonError as e:
        _fail(str(e), EXIT_COMPARE)

    report.to_frame().to_csv(state.dirs["sweeps"] / "compare_report.csv", index=False, float_format="%.17g")
    typer.echo(report.render())
    if not report.passed:
        for failure in report.failures:
            logger.warning(failure)
        typer.echo("Comparison FAILED", err=True)
        raise typer.Exit(EXIT_COMPARE)
    typer.echo("Comparison passed")


if __name__ == "__main__":
    try:
        app()
    except IlroError as e:
        logger.error(f"Run failed: {e}")
        raise SystemExit(EXIT_FAILURE)
