"""Configuration-driven entry point: plan, simulate, score.

One scenario file describes the structure, planner, controller, estimator and
camera; the subcommands write CSV/JSON/SVG artifacts into the output
directory.  Exit codes: 0 success, 2 config error, 3 planning error,
4 simulation fault, 5 solver failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import arm as arm_mod
from . import metrics as metrics_mod
from .core import TimedPath
from .errors import (
    ConfigError,
    CsvParseError,
    DegenerateObservationError,
    FilterDivergenceError,
    IkFailureError,
    InsufficientDataError,
    InvalidSpecError,
    JointLimitError,
    MobilePrintError,
    NoVisibleMarkerError,
    PlanningError,
    SolverFailureError,
    SynchronizationError,
    UnknownMarkerError,
    VerticalDegeneracyError,
    VisibilityFaultError,
)
from .mpc import MpcConfig
from .sim import SimConfig, marker_map_for_plan, run_closed_loop
from .toolpath import (
    DEFAULT_CLEARANCE,
    DEFAULT_REACH_MIN,
    DEFAULT_STANDOFF,
    PrintPlan,
    StructureSpec,
    prescribe_base_path,
    read_plan_csv,
    slice_structure,
    synchronize,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PLANNING = 3
EXIT_SIMULATION = 4
EXIT_SOLVER = 5

METRICS_PROTOCOL_LAPS = 15

DEFAULT_SCENARIO = {
    "structure": {
        "length": 2.1,
        "width": 0.45,
        "height": 0.10,
        "layer_height": 0.01,
        "infill_spacing": 0.1,
    },
    "nozzle_speed": 0.1,
    "dt": 0.025,
    "standoff": DEFAULT_STANDOFF,
    "clearance": DEFAULT_CLEARANCE,
    "chain_file": None,
    "markers": {"spacing": 1.0, "margin": 1.5},
    "sim": {},
    "mpc": {},
    "ekf": {},
    "out_dir": "out",
}


@dataclass
class Scenario:
    """Validated scenario: everything needed to plan and simulate one run."""

    structure: StructureSpec
    nozzle_speed: float
    dt: float
    standoff: float
    clearance: float
    chain: arm_mod.KinematicChain
    marker_spacing: float
    marker_margin: float
    sim_cfg: SimConfig
    mpc_cfg: MpcConfig
    ekf_q: np.ndarray
    ekf_r: np.ndarray
    out_dir: Path


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown scenario key: {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            merged = dict(out[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def _build_structure(data: dict) -> StructureSpec:
    try:
        return StructureSpec.rectangle(
            float(data["length"]),
            float(data["width"]),
            float(data["height"]),
            float(data["layer_height"]),
            float(data.get("infill_spacing", 0.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"structure is missing key {exc}") from exc


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> Scenario:
    data = _merge(DEFAULT_SCENARIO, data)
    structure = _build_structure(data["structure"])
    chain_file = data["chain_file"]
    if chain_file is None:
        chain = arm_mod.reference_chain()
    else:
        chain_path = Path(chain_file)
        if base_dir is not None and not chain_path.is_absolute():
            chain_path = base_dir / chain_path
        chain = arm_mod.load_chain(chain_path)
    dt = float(data["dt"])
    try:
        sim_cfg = SimConfig(dt=dt, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in data["sim"].items()
        })
        mpc_cfg = MpcConfig(dt=dt, **data["mpc"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sim/mpc configuration: {exc}") from exc
    ekf = data["ekf"]
    ekf_q = np.diag(ekf["q_diag"]) if "q_diag" in ekf else sim_cfg.process_noise_cov()
    ekf_r = np.diag(ekf["r_diag"]) if "r_diag" in ekf else sim_cfg.measurement_noise_cov()
    markers = data["markers"]
    return Scenario(
        structure=structure,
        nozzle_speed=float(data["nozzle_speed"]),
        dt=dt,
        standoff=float(data["standoff"]),
        clearance=float(data["clearance"]),
        chain=chain,
        marker_spacing=float(markers.get("spacing", 1.0)),
        marker_margin=float(markers.get("margin", 1.5)),
        sim_cfg=sim_cfg,
        mpc_cfg=mpc_cfg,
        ekf_q=ekf_q,
        ekf_r=ekf_r,
        out_dir=Path(data["out_dir"]),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a JSON object")
    return scenario_from_dict(data, base_dir=path.parent)


def default_scenario() -> Scenario:
    return scenario_from_dict({})


def build_plan(scenario: Scenario, laps: int | None = None) -> PrintPlan:
    """Plan the scenario's print; `laps` overrides the layer count for air runs."""
    structure = scenario.structure
    if laps is not None:
        structure = StructureSpec(
            structure.footprint,
            structure.length,
            structure.width,
            laps * structure.layer_height,
            structure.layer_height,
            structure.infill_spacing,
        )
    nozzle = slice_structure(structure, scenario.nozzle_speed, scenario.dt)
    base = prescribe_base_path(
        nozzle,
        standoff=scenario.standoff,
        clearance=scenario.clearance,
        reach_min=DEFAULT_REACH_MIN,
        reach_max=scenario.chain.reach_max,
    )
    return synchronize(
        nozzle, base, reach_min=DEFAULT_REACH_MIN, reach_max=scenario.chain.reach_max
    )


def _write_json(path: Path, data: dict) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def plan_summary(plan: PrintPlan) -> dict:
    dist = plan.reach_distances()
    return {
        "samples": len(plan),
        "dt_s": plan.dt,
        "duration_s": plan.duration,
        "layer_count": plan.layer_count,
        "nozzle_speed_m_s": plan.nozzle_speed,
        "nozzle_length_m": plan.nozzle_path.path_length(),
        "base_length_m": plan.base_path.path_length(),
        "reach_min_m": float(dist.min()),
        "reach_max_m": float(dist.max()),
    }


def cmd_plan(scenario: Scenario, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = build_plan(scenario)
    plan.to_csv(out_dir / "plan.csv")
    _write_json(out_dir / "plan_summary.json", plan_summary(plan))
    print(f"plan: {len(plan)} samples, {plan.duration:.1f} s -> {out_dir / 'plan.csv'}")
    return EXIT_OK


def cmd_simulate(
    scenario: Scenario,
    out_dir: Path,
    laps: int | None = None,
    no_print: bool = False,
    seed: int | None = None,
) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    sim_cfg = scenario.sim_cfg
    if seed is not None:
        sim_cfg = SimConfig(
            dt=sim_cfg.dt,
            process_noise_std=sim_cfg.process_noise_std,
            detection_noise_std=sim_cfg.detection_noise_std,
            latency_steps=sim_cfg.latency_steps,
            camera_fov=sim_cfg.camera_fov,
            camera_range=sim_cfg.camera_range,
            seed=seed,
            visibility_fault_window=sim_cfg.visibility_fault_window,
        )
    metrics_run = no_print
    plan = build_plan(scenario, laps=laps if laps is not None else (METRICS_PROTOCOL_LAPS if metrics_run else None))
    marker_map = marker_map_for_plan(plan, scenario.marker_spacing, scenario.marker_margin)
    report = run_closed_loop(
        plan,
        marker_map,
        sim_cfg,
        scenario.mpc_cfg,
        chain=None if no_print else scenario.chain,
        ekf_process_noise=scenario.ekf_q,
        ekf_measurement_noise=scenario.ekf_r,
    )
    plan.to_csv(out_dir / "plan.csv")
    report.write_csv(out_dir / "sim_trajectory.csv")
    report.write_estimator_trace(out_dir / "est_trace.csv")
    report.write_controller_trace(out_dir / "ctrl_trace.csv")
    summary = report.summary()
    summary["plan"] = plan_summary(plan)

    fits = None
    labeled = None
    if metrics_run:
        precision_report, accuracy_m, labeled = metrics_mod.assess(
            report.true_path, report.desired_path
        )
        fits = list(precision_report.fits)
        metrics_mod.write_metrics_json(out_dir / "metrics.json", precision_report, accuracy_m)
        summary["metrics"] = metrics_mod.metrics_json(precision_report, accuracy_m)
    metrics_mod.write_assessment_svg(
        out_dir / "assessment.svg",
        report.true_path,
        report.desired_path,
        fits,
        labeled,
        nozzle=report.nozzle_world,
    )
    _write_json(out_dir / "summary.json", summary)
    print(
        f"simulate: {len(report)} steps, base max err "
        f"{summary['base_tracking']['max_m'] * 1000:.2f} mm -> {out_dir / 'summary.json'}"
    )
    return EXIT_OK


def read_trajectory_csv(path) -> TimedPath:
    """Measured base path (true pose columns) from a sim_trajectory.csv."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"report file not found: {path}")
    rows = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        cols = header.split(",")
        required = ["k", "t", "true_x", "true_y", "true_theta"]
        if cols[: len(required)] != required:
            raise CsvParseError(1, f"unexpected trajectory header: {header!r}")
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise CsvParseError(
                    line_no, f"expected {len(cols)} columns, got {len(parts)} at line {line_no}"
                )
            try:
                rows.append([float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])])
            except ValueError:
                raise CsvParseError(line_no, f"non-numeric value at line {line_no}") from None
    if len(rows) < 2:
        raise CsvParseError(2, "trajectory needs at least two rows")
    arr = np.array(rows)
    dt = arr[1, 0] - arr[0, 0] if arr[1, 0] > arr[0, 0] else 1.0
    return TimedPath(dt, arr[:, 1:])


def cmd_metrics(report_csv, plan_csv, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    measured = read_trajectory_csv(report_csv)
    plan_path = Path(plan_csv)
    if not plan_path.exists():
        raise ConfigError(f"plan file not found: {plan_path}")
    desired = read_plan_csv(plan_path).base_path
    precision_report, accuracy_m, labeled = metrics_mod.assess(measured, desired)
    metrics_mod.write_metrics_json(out_dir / "metrics.json", precision_report, accuracy_m)
    metrics_mod.write_assessment_svg(
        out_dir / "assessment.svg",
        measured,
        desired,
        list(precision_report.fits),
        labeled,
    )
    print(
        f"metrics: e_max {precision_report.e_max * 1000:.2f} mm, "
        f"e_mean {precision_report.e_mean * 1000:.2f} mm, "
        f"accuracy {accuracy_m * 1000:.2f} mm -> {out_dir / 'metrics.json'}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobileprint",
        description="Plan, simulate and score a printing-while-moving cell",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    plan_p = sub.add_parser("plan", help="generate the synchronized print plan")
    plan_p.add_argument("--scenario", type=Path, default=None)
    plan_p.add_argument("--out", type=Path, default=None)

    sim_p = sub.add_parser("simulate", help="run the closed loop against the virtual plant")
    sim_p.add_argument("--scenario", type=Path, default=None)
    sim_p.add_argument("--out", type=Path, default=None)
    sim_p.add_argument("--seed", type=int, default=None)
    sim_p.add_argument("--laps", type=int, default=None)
    sim_p.add_argument(
        "--no-print",
        action="store_true",
        help="air run: skip the arm and emit the precision report (15 laps by default)",
    )

    met_p = sub.add_parser("metrics", help="score a trajectory CSV against a plan CSV")
    met_p.add_argument("--report", type=Path, required=True)
    met_p.add_argument("--plan", type=Path, required=True)
    met_p.add_argument("--out", type=Path, default=None)
    return parser


def _exit_code_for(exc: MobilePrintError) -> int:
    if isinstance(exc, (ConfigError, CsvParseError, InsufficientDataError, VerticalDegeneracyError)):
        return EXIT_CONFIG
    if isinstance(exc, (InvalidSpecError, PlanningError, SynchronizationError)):
        return EXIT_PLANNING
    if isinstance(exc, SolverFailureError):
        return EXIT_SOLVER
    if isinstance(
        exc,
        (
            VisibilityFaultError,
            IkFailureError,
            JointLimitError,
            FilterDivergenceError,
            DegenerateObservationError,
            UnknownMarkerError,
            NoVisibleMarkerError,
        ),
    ):
        return EXIT_SIMULATION
    return EXIT_SIMULATION


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "metrics":
            out_dir = args.out if args.out is not None else Path("out")
            return cmd_metrics(args.report, args.plan, out_dir)
        scenario = load_scenario(args.scenario) if args.scenario else default_scenario()
        out_dir = args.out if args.out is not None else scenario.out_dir
        if args.command == "plan":
            return cmd_plan(scenario, out_dir)
        return cmd_simulate(
            scenario,
            out_dir,
            laps=args.laps,
            no_print=args.no_print,
            seed=args.seed,
        )
    except MobilePrintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
