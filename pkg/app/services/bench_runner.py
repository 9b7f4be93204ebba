import configparser
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.api.schemas import CSV_COLUMNS, HISTORY_COLUMNS, ResultRow, ScenarioConfig
from app.core.config import settings
from app.core.exceptions import ConfigError, DivergenceError, ReportError
from app.core.logging_config import get_logger
from app.services.coupling_core import CouplingProblem, PatchLayout, build_beam_problem, reference_solve, submodel_solve
from app.services.iteration_engines import RunRecord, run_aitken, run_async, run_sync
from app.services.scheduling import DelaySchedule, make_backend

logger = get_logger(__name__)

ENGINES = {"sync": run_sync, "aitken": run_aitken, "async": run_async}


@dataclass
class RunOutcome:
    row: ResultRow
    record: Optional[RunRecord] = None


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    loc = [str(part) for part in first["loc"]]
    key = next((part for part in reversed(loc) if not part.isdigit()), loc[-1] if loc else None)
    return ConfigError(f"Invalid value for '{'.'.join(loc)}': {first['msg']}", key=key)


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    """Parses INI text into a validated ScenarioConfig; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {source}: {e}") from e
    data: Dict[str, Dict[str, str]] = {section: dict(parser.items(section)) for section in parser.sections()}
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        error = _config_error(e)
        logger.error("Invalid scenario configuration", source=source, key=error.key, error=str(error))
        raise error from e


def load_config(path) -> ScenarioConfig:
    """
    Loads a scenario file (INI sections scenario, geometry, material, delays, output).

    Raises:
        ConfigError: If the file is unreadable, malformed, or fails validation (names the key).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return parse_config(text, source=str(path))


def apply_overrides(config: ScenarioConfig, mode: Optional[str] = None, omega: Optional[Sequence[float]] = None,
                    seed: Optional[int] = None, out: Optional[str] = None) -> ScenarioConfig:
    """Command-line values replace file values; the result is validated again."""
    data = config.model_dump()
    if mode is not None:
        data["scenario"]["mode"] = mode
    if omega is not None:
        data["scenario"]["omega"] = omega
    if seed is not None:
        data["scenario"]["seed"] = seed
    if out is not None:
        data["output"]["dir"] = out
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e) from e


def build_problem(config: ScenarioConfig) -> CouplingProblem:
    geometry, material = config.geometry, config.material
    layout = PatchLayout(
        grid=tuple(geometry.grid),
        edge_length=geometry.edge_length,
        patches=None if geometry.patches is None else tuple(tuple(c) for c in geometry.patches),
        clamped_face=geometry.clamped_face,
    )
    return build_beam_problem(
        layout,
        coarse_elems=geometry.coarse_elems,
        fine_elems=geometry.fine_elems,
        E_matrix=material.e_matrix,
        E_ratio=material.e_ratio,
        nu=material.nu,
        radius_fraction=material.radius_fraction,
        body_load=material.body_load,
        name=config.scenario.name,
    )


def delay_schedule(config: ScenarioConfig) -> DelaySchedule:
    delays = config.delays
    return DelaySchedule(mode=delays.mode, seed=config.scenario.seed, delay=delays.delay,
                         per_worker=dict(delays.per_worker), slowdown=dict(delays.slowdown))


def solve_costs(config: ScenarioConfig) -> Tuple[float, float]:
    """
    (global, fine) solve costs for the backends. Without an explicit fine cost, cost is
    taken proportional to element count: the global model spans every cube.
    """
    delays, geometry = config.delays, config.geometry
    if delays.fine_cost is not None:
        return delays.global_cost, delays.fine_cost
    n_cubes = geometry.grid[0] * geometry.grid[1] * geometry.grid[2]
    ratio = geometry.fine_elems ** 3 / (n_cubes * geometry.coarse_elems ** 3)
    return delays.global_cost, delays.global_cost * ratio


def _relative_error(u: Optional[np.ndarray], reference: Optional[np.ndarray]) -> Optional[float]:
    if u is None or reference is None:
        return None
    denom = float(np.linalg.norm(reference))
    return float(np.linalg.norm(u - reference) / denom) if denom > 0 else float(np.linalg.norm(u))


def _record_row(scenario: str, record: RunRecord, workers: int, reference: Optional[np.ndarray]) -> ResultRow:
    return ResultRow(
        scenario=scenario,
        mode=record.mode,
        omega=record.omega0,
        it_global=record.it_global,
        it_fine_min=record.it_fine_min,
        it_fine_max=record.it_fine_max,
        wall_ms=record.wall_ms,
        rel_residual=record.rel_residual if np.isfinite(record.rel_residual) else None,
        rel_error=_relative_error(record.u_A, reference),
        converged=record.converged,
        status=record.status.value,
        workers=workers,
    )


def run_outcomes(config: ScenarioConfig, problem: Optional[CouplingProblem] = None) -> List[RunOutcome]:
    """Runs every (mode, omega, workers) combination of the scenario on one shared problem."""
    problem = problem or build_problem(config)
    reference = None
    if problem.summary()["total_dofs"] <= settings.oracle_dof_cap:
        reference = reference_solve(problem).interface_displacement
    else:
        logger.warning("Problem exceeds oracle cap, rel_error left empty", total_dofs=problem.summary()["total_dofs"])

    scenario = config.scenario
    worker_counts = scenario.workers or [problem.n_patches]
    if max(worker_counts) > problem.n_patches:
        raise ConfigError(f"workers {max(worker_counts)} exceeds the {problem.n_patches} fine patches", key="workers")
    schedule = delay_schedule(config)
    global_cost, fine_cost = solve_costs(config)
    outcomes: List[RunOutcome] = []
    for mode in scenario.mode:
        if mode == "submodel":
            baseline = submodel_solve(problem)
            outcomes.append(RunOutcome(row=ResultRow(
                scenario=f"{scenario.name}/w0", mode="submodel", omega=0.0, it_global=0,
                it_fine_min=1, it_fine_max=1, wall_ms=0.0, rel_residual=None,
                rel_error=_relative_error(baseline.interface_displacement, reference),
                converged=True, status="baseline", workers=1,
            )))
            continue
        for workers in worker_counts:
            for omega in scenario.omega:
                engine = ENGINES[mode]
                try:
                    backend = make_backend(scenario.backend, schedule, global_cost=global_cost, fine_cost=fine_cost)
                    record = engine(problem, omega, scenario.tol, scenario.max_iters, backend=backend, workers=workers)
                except DivergenceError as e:
                    logger.warning("Run diverged", mode=mode, omega=omega, workers=workers, iteration=e.iteration)
                    record = e.record
                outcomes.append(RunOutcome(row=_record_row(f"{scenario.name}/w{workers}", record, workers, reference), record=record))
    return outcomes


def run_scenario(config: ScenarioConfig, problem: Optional[CouplingProblem] = None) -> List[ResultRow]:
    """
    Builds the problem once, runs the requested engines and sweeps, and writes the
    CSV, history and JSON reports when output.write is set.

    Returns:
        One ResultRow per run; divergent runs are rows with converged=false.
    """
    problem = problem or build_problem(config)
    outcomes = run_outcomes(config, problem)
    rows = [o.row for o in outcomes]
    if config.output.write:
        emit_report(rows, config.output.dir, records=[o.record for o in outcomes],
                    summary={"config": config.model_dump(mode="json"), "problem": problem.summary(),
                             "fingerprint": problem.fingerprint()})
    return rows


def _history_name(index: int, row: ResultRow) -> str:
    return f"{index:03d}_{row.mode}_w{row.workers}_omega{row.omega:g}.csv"


def emit_report(rows: Sequence[ResultRow], path, records: Optional[Sequence[Optional[RunRecord]]] = None,
                summary: Optional[dict] = None) -> Dict[str, Path]:
    """
    Writes results.csv, one history CSV per recorded run and summary.json under `path`.

    Raises:
        ReportError: If the directory or a file cannot be written.
    """
    out_dir = Path(path)
    records = list(records) if records is not None else [None] * len(rows)
    files: Dict[str, Path] = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        results = out_dir / "results.csv"
        with results.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row.csv_record())
        files["results"] = results

        runs = []
        for index, (row, record) in enumerate(zip(rows, records)):
            entry = {"row": row.model_dump(mode="json")}
            if record is not None:
                history = out_dir / "history" / _history_name(index, row)
                history.parent.mkdir(parents=True, exist_ok=True)
                with history.open("w", newline="", encoding="utf-8") as handle:
                    writer = csv.writer(handle, lineterminator="\n")
                    writer.writerow(HISTORY_COLUMNS)
                    for j, t, norm, omega in record.history_rows():
                        writer.writerow([j, f"{t:.6f}", f"{norm:.17g}", f"{omega:.17g}"])
                files[f"history_{index}"] = history
                entry.update({
                    "history_file": str(history.relative_to(out_dir)),
                    "it_fine": record.it_fine,
                    "sigma": [list(s) for s in record.sigma],
                    "verification_residual": record.verification_residual,
                    "history": [dict(zip(HISTORY_COLUMNS, r)) for r in record.history_rows()],
                })
            runs.append(entry)

        document = dict(summary or {})
        document["runs"] = runs
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(document, indent=2, allow_nan=True), encoding="utf-8")
        files["summary"] = summary_path
    except OSError as e:
        logger.error("Cannot write report", path=str(out_dir), error=str(e))
        raise ReportError(f"Cannot write report to {out_dir}: {e}") from e
    logger.info("Report written", path=str(out_dir), rows=len(rows))
    return files
