"""Command-line entry points.

Exit codes: 0 ok, 2 configuration, 3 file system, 4 input data, 5 pipeline.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fileio as fio
from .config import ConfigError, RunConfig, load_config
from .geometry import Pose, Rotation3
from .metrics import DegenerateAlignment, EmptyAssociation, GaugeMismatch, anchor_error, trajectory_error
from .pipeline import (
    InitializationStarved,
    PipelineError,
    initial_anchor_map,
    run_calibration,
    run_localization,
    run_simultaneous,
)
from .simulator import generate
from .trilateration import InconsistentRanges, uwb_fix_stream

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_PIPELINE = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class Dataset:
    """Streams read back from a dataset directory."""

    odometry: list
    ranges: list
    ground_truth: list | None = None
    truth_anchors: object = None
    anchor_range_matrices: list = field(default_factory=list)


# --- helpers -----------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.simulation.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    return out


def _matrix_files(data: Path) -> list[Path]:
    return sorted(data.glob("anchor_ranges_*.txt"))


def _load_dataset(data: Path, need_odometry: bool = True, need_ranges: bool = True) -> Dataset:
    if not data.is_dir():
        raise fio.DataError(f"{data}: dataset directory not found")
    odometry = fio.read_odometry(data / "odometry.csv") if need_odometry else []
    ranges = fio.read_ranges(data / "ranges.csv") if need_ranges else []
    gt = fio.read_poses(data / "ground_truth.csv") if (data / "ground_truth.csv").exists() else None
    truth = fio.read_anchors(data / "anchors_truth.csv") if (data / "anchors_truth.csv").exists() else None
    mats = [fio.read_range_matrix(p) for p in _matrix_files(data)]
    return Dataset(odometry, ranges, gt, truth, mats)


def _positions(stamped) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([t for t, _ in stamped], dtype=float),
            np.array([p.translation for _, p in stamped], dtype=float).reshape(-1, 3))


def _read_trajectory(path: Path):
    return fio.read_tum(path) if path.suffix == ".tum" else fio.read_poses(path)


def _trajectory_metrics(prefix: str, t_est, p_est, gt) -> dict:
    t_ref, p_ref = _positions(gt)
    rep = trajectory_error(t_est, p_est, t_ref, p_ref)
    return {f"{prefix}_rmse": rep.rmse, f"{prefix}_max": rep.max, f"{prefix}_min": rep.min,
            f"{prefix}_pairs": len(rep.errors)}


def _anchor_metrics(est, ref) -> dict:
    rep = anchor_error(est, ref)
    out = {f"anchor_error_{n}": float(e) for n, e in zip(rep.names, rep.errors)}
    out["anchor_rmse"] = rep.rmse
    return out


def _reference_anchors(ds: Dataset, gauge):
    """Truth anchors carrying the run's gauge masks, if the dataset has them."""
    if ds.truth_anchors is None:
        return None
    return type(gauge)(list(ds.truth_anchors.ids), ds.truth_anchors.positions, gauge.fixed.copy())


def _write_reports(path: Path, groups):
    with path.open("w") as fh:
        for graph, reports in groups:
            for i, rep in enumerate(reports):
                fh.write(f"{graph} {i} {rep.summary()}\n")


def _fix_poses(fixes):
    return [(f.timestamp, Pose(Rotation3.identity(), f.position)) for f in fixes]


def _manifest(out: Path, cfg: RunConfig, command: str, files):
    items = {
        "command": command,
        "seed": cfg.simulation.seed,
        "config_sha256": cfg.digest(),
        "version": __version__,
        "files": {name: fio.file_digest(out / name) for name in files},
    }
    fio.write_manifest(out / "manifest.json", items)


def _print_metrics(metrics: dict):
    for k, v in metrics.items():
        print(f"{k} = {fio.format_value(v)}")


# --- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = generate(cfg.simulation)
    files = ["odometry.csv", "ranges.csv", "ground_truth.csv", "anchors_truth.csv", "config.yaml"]
    fio.write_odometry(out / "odometry.csv", ds.odometry)
    fio.write_ranges(out / "ranges.csv", ds.ranges)
    fio.write_poses(out / "ground_truth.csv", ds.ground_truth)
    fio.write_anchors(out / "anchors_truth.csv", ds.truth_anchors)
    for old in _matrix_files(out):
        old.unlink()
    for i, D in enumerate(ds.anchor_range_matrices):
        name = f"anchor_ranges_{i}.txt"
        fio.write_range_matrix(out / name, D)
        files.append(name)
    (out / "config.yaml").write_text(cfg.dump())
    _manifest(out, cfg, "simulate", files)
    print(f"wrote {len(ds.odometry)} odometry poses, {len(ds.ranges)} ranges to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(Path(args.data))
    out = _out_dir(args, cfg)
    opts = cfg.pipeline_options()
    res = run_simultaneous(ds, cfg.gauge, opts)
    loc, cal = res.localization, res.calibration
    if not loc.initialized:
        raise InitializationStarved("too few UWB/odometry correspondences to place the map frame")

    fio.write_tum(out / "estimated_trajectory.tum", zip(loc.timestamps, loc.trajectory))
    fio.write_tum(out / "uwb_fixes.tum", _fix_poses(res.fixes))
    fio.write_anchor_trace(out / "anchor_trace.csv", cal.names, cal.trace)
    fio.write_poses(out / "t_um_trace.csv", loc.t_um_trace)
    fio.write_anchors(out / "anchors.csv", cal.anchors)
    _write_reports(out / "solver_reports.txt", [("localization", loc.reports), ("calibration", cal.reports)])

    metrics = {
        "odometry_poses": len(ds.odometry),
        "trajectory_poses": len(loc.trajectory),
        "uwb_fixes": len(res.fixes),
        "calibration_solves": len(cal.reports),
        "calibration_started_at": "none" if res.calibration_started_at is None else float(res.calibration_started_at),
        "dropped_fixes": loc.diagnostics.dropped_fixes,
        "dropped_ranges": cal.diagnostics.dropped_ranges,
        "unobserved_anchors": " ".join(str(a) for a in cal.unobserved) or "none",
    }
    if ds.ground_truth is not None:
        t_est, p_est = loc.timestamps, loc.positions()
        metrics |= _trajectory_metrics("fused", t_est, p_est, ds.ground_truth)
        if res.fixes:
            metrics |= _trajectory_metrics(
                "uwb_only", [f.timestamp for f in res.fixes], [f.position for f in res.fixes], ds.ground_truth)
    ref = _reference_anchors(ds, cal.anchors)
    if ref is not None:
        metrics |= _anchor_metrics(cal.anchors, ref)
    fio.write_key_values(out / "metrics_report.txt", metrics)
    _manifest(out, cfg, "run", ["estimated_trajectory.tum", "uwb_fixes.tum", "anchor_trace.csv", "t_um_trace.csv",
                                "anchors.csv", "solver_reports.txt", "metrics_report.txt"])
    _print_metrics(metrics)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    ds = _load_dataset(data, need_odometry=False)
    traj_path = Path(args.trajectory) if args.trajectory else data / "ground_truth.csv"
    traj = _read_trajectory(traj_path)
    out = _out_dir(args, cfg)
    opts = cfg.pipeline_options()
    anchors0 = initial_anchor_map(cfg.gauge, opts, ds.anchor_range_matrices)
    t, p = _positions(traj)
    res = run_calibration(list(zip(t, p)), ds.ranges, anchors0, opts)
    fio.write_anchor_trace(out / "anchor_trace.csv", res.names, res.trace)
    fio.write_anchors(out / "anchors.csv", res.anchors)
    _write_reports(out / "solver_reports.txt", [("calibration", res.reports)])
    metrics = {"ranges": len(ds.ranges), "calibration_solves": len(res.reports),
               "dropped_ranges": res.diagnostics.dropped_ranges,
               "unobserved_anchors": " ".join(str(a) for a in res.unobserved) or "none"}
    ref = _reference_anchors(ds, res.anchors)
    if ref is not None:
        metrics |= _anchor_metrics(res.anchors, ref)
    fio.write_key_values(out / "metrics_report.txt", metrics)
    _manifest(out, cfg, "calibrate", ["anchor_trace.csv", "anchors.csv", "solver_reports.txt", "metrics_report.txt"])
    _print_metrics(metrics)
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(Path(args.data))
    out = _out_dir(args, cfg)
    opts = cfg.pipeline_options()
    anchors = initial_anchor_map(cfg.gauge, opts, ds.anchor_range_matrices)
    fixes = uwb_fix_stream(ds.ranges, anchors, opts.fix_window, opts.tag_height)
    loc = run_localization(ds.odometry, fixes, opts)
    fio.write_tum(out / "estimated_trajectory.tum", zip(loc.timestamps, loc.trajectory))
    fio.write_tum(out / "uwb_fixes.tum", _fix_poses(fixes))
    fio.write_poses(out / "t_um_trace.csv", loc.t_um_trace)
    _write_reports(out / "solver_reports.txt", [("localization", loc.reports)])
    metrics = {"odometry_poses": len(ds.odometry), "trajectory_poses": len(loc.trajectory),
               "uwb_fixes": len(fixes), "dropped_fixes": loc.diagnostics.dropped_fixes}
    if ds.ground_truth is not None:
        metrics |= _trajectory_metrics("fused", loc.timestamps, loc.positions(), ds.ground_truth)
        if fixes:
            metrics |= _trajectory_metrics(
                "uwb_only", [f.timestamp for f in fixes], [f.position for f in fixes], ds.ground_truth)
    fio.write_key_values(out / "metrics_report.txt", metrics)
    _manifest(out, cfg, "localize", ["estimated_trajectory.tum", "uwb_fixes.tum", "t_um_trace.csv",
                                     "solver_reports.txt", "metrics_report.txt"])
    _print_metrics(metrics)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not (args.trajectory and args.reference) and not (args.anchors and args.reference_anchors):
        raise ConfigError("evaluate needs --trajectory/--reference and/or --anchors/--reference-anchors")
    metrics: dict = {}
    per_pose = None
    if args.trajectory or args.reference:
        if not (args.trajectory and args.reference):
            raise ConfigError("--trajectory and --reference go together")
        t_est, p_est = _positions(_read_trajectory(Path(args.trajectory)))
        t_ref, p_ref = _positions(_read_trajectory(Path(args.reference)))
        rep = trajectory_error(t_est, p_est, t_ref, p_ref, pre_align=not args.no_align, max_gap=args.max_gap)
        metrics |= {"trajectory_rmse": rep.rmse, "trajectory_max": rep.max, "trajectory_min": rep.min,
                    "trajectory_pairs": len(rep.errors)}
        per_pose = rep
    if args.anchors or args.reference_anchors:
        if not (args.anchors and args.reference_anchors):
            raise ConfigError("--anchors and --reference-anchors go together")
        metrics |= _anchor_metrics(fio.read_anchors(args.anchors), fio.read_anchors(args.reference_anchors))
    _print_metrics(metrics)
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            fio.write_key_values(out / "metrics_report.txt", metrics)
            if per_pose is not None:
                fio.write_pose_errors(out / "pose_errors.csv", per_pose.timestamps, per_pose.errors)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    return EXIT_OK


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override simulation.seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: config 'output')")

    parser = argparse.ArgumentParser(prog="uwbcal", description="UWB anchor calibration and robot localization")
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override simulation.seed")
    parser.add_argument("--out", default=None, help="output directory (default: config 'output')")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", parents=[common], help="localization and calibration on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", parents=[common], help="calibration graph from a known trajectory")
    p.add_argument("--data", required=True, help="dataset directory (ranges.csv)")
    p.add_argument("--trajectory", help="TUM or pose CSV in the UWB frame (default: ground_truth.csv)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("localize", parents=[common], help="fusion graph only, with the initial anchors")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", parents=[common], help="trajectory and anchor error reports")
    p.add_argument("--trajectory", help="estimated trajectory (TUM or pose CSV)")
    p.add_argument("--reference", help="reference trajectory (TUM or pose CSV)")
    p.add_argument("--anchors", help="estimated anchors CSV")
    p.add_argument("--reference-anchors", help="reference anchors CSV")
    p.add_argument("--no-align", action="store_true", help="skip rigid pre-alignment")
    p.add_argument("--max-gap", type=float, default=0.05, help="association gap in seconds")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fio.DataError, EmptyAssociation, GaugeMismatch, DegenerateAlignment, InconsistentRanges) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, InitializationStarved) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

