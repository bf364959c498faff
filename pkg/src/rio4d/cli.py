"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 solver failure (outputs are still written).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .estimator import Mode
from .imu_preint import EmptyStream as EmptyImuStream
from .imu_preint import NonMonotonicTimestamps
from .io import (
    EmptyFile,
    ParseError,
    Trajectory,
    atomic_write,
    load_imu_csv,
    load_radar_csv,
    load_tum,
    save_imu_csv,
    save_labels_csv,
    save_radar_csv,
    save_tum,
)
from .metrics import NoAssociations, evaluate_ate
from .pipeline import EmptyStream, PipelineError, run_pipeline
from .sim import PRESETS, make_preset

log = logging.getLogger("rio4d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3

RADAR_FILE = "radar.csv"
IMU_FILE = "imu.csv"
GT_FILE = "groundtruth.txt"
LABELS_FILE = "labels.csv"

DATA_ERRORS = (ParseError, EmptyFile, NonMonotonicTimestamps, EmptyStream, EmptyImuStream, NoAssociations,
               FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _load_streams(args):
    data = Path(args.data) if args.data else None
    radar = Path(args.radar) if args.radar else (data / RADAR_FILE if data else None)
    imu = Path(args.imu) if args.imu else (data / IMU_FILE if data else None)
    if radar is None or imu is None:
        raise UsageError("give --data DIR or both --radar and --imu")
    return load_radar_csv(radar), load_imu_csv(imu)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    ds = make_preset(args.preset, args.seed, args.noise)
    out = Path(args.out)
    save_radar_csv(out / RADAR_FILE, ds.scans)
    save_imu_csv(out / IMU_FILE, ds.imu)
    save_tum(out / GT_FILE, Trajectory.from_states(ds.ground_truth))
    save_labels_csv(out / LABELS_FILE, ds.scans, ds.labels)
    _write_json(out / "simulation.json", {
        "preset": args.preset, "seed": args.seed, "noise": args.noise,
        "frames": len(ds.scans), "imu_samples": len(ds.imu), "landmarks": len(ds.world),
    })
    print(f"wrote {len(ds.scans)} scans and {len(ds.imu)} IMU samples to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    scans, imu = _load_streams(args)
    t0 = time.perf_counter()
    result = run_pipeline(cfg, scans, imu)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    save_tum(out / "trajectory.txt", Trajectory.from_states(result.states))
    diag = result.diagnostics_dict()
    diag.update({"mode": cfg.mode, "seed": cfg.seed, "runtime_s": elapsed})
    _write_json(out / "diagnostics.json", diag)
    atomic_write(out / "config.txt", cfg.dumps())
    print(f"{len(result.states)} poses written to {out / 'trajectory.txt'} "
          f"({diag['degraded_frames']} degraded, {diag['diverged_frames']} diverged)")
    return EXIT_SOLVER if result.any_diverged else EXIT_OK


def cmd_eval(args) -> int:
    est = load_tum(args.estimate)
    ref = load_tum(args.reference)
    res = evaluate_ate(est, ref, args.tolerance, align=not args.no_align)
    d = res.as_dict()
    print(f"ATE RMSE {d['rmse']:.6f} m  mean {d['mean']:.6f}  max {d['max']:.6f}  poses {d['poses']}")
    if args.json:
        d["errors"] = res.errors
        d["timestamps"] = res.timestamps
        _write_json(Path(args.json), d)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _load_config(args)
    scans, imu = _load_streams(args)
    ref_path = Path(args.reference) if args.reference else (Path(args.data) / GT_FILE if args.data else None)
    if ref_path is None:
        raise UsageError("ablate needs --reference or --data DIR containing groundtruth.txt")
    ref = load_tum(ref_path)
    out = Path(args.out)
    rows = []
    status = EXIT_OK
    for mode in args.modes:
        cfg = dataclasses.replace(base, mode=mode)
        t0 = time.perf_counter()
        result = run_pipeline(cfg, scans, imu)
        elapsed = time.perf_counter() - t0
        traj = Trajectory.from_states(result.states)
        tag = Mode.parse(mode).name.lower()
        save_tum(out / f"trajectory_{tag}.txt", traj)
        ate = evaluate_ate(traj, ref, args.tolerance)
        degraded = sum(d.degraded for d in result.diagnostics)
        rows.append((Mode.parse(mode).value, ate.rmse, ate.mean, ate.max, degraded, elapsed))
        if result.any_diverged:
            status = EXIT_SOLVER
        print(f"{Mode.parse(mode).value:8s} ATE RMSE {ate.rmse:.4f} m  ({degraded} degraded frames, {elapsed:.1f} s)")
    lines = ["mode,ate_rmse,ate_mean,ate_max,degraded_frames,runtime_s"]
    lines += [f"{m},{r!r},{mu!r},{mx!r},{dg},{rt:.3f}" for m, r, mu, mx, dg, rt in rows]
    atomic_write(out / "ablation.csv", "\n".join(lines) + "\n")
    _write_json(out / "ablation.json", [
        {"mode": m, "ate_rmse": r, "ate_mean": mu, "ate_max": mx, "degraded_frames": dg, "runtime_s": rt}
        for m, r, mu, mx, dg, rt in rows
    ])
    return status


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rio4d", description="4D radar-inertial odometry")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a simulated dataset")
    s.add_argument("--preset", choices=PRESETS, default="circle60")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="sensor noise scale, 0 for noise-free")
    s.add_argument("--out", "-o", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    modes = [m.value for m in Mode]

    def stream_args(q):
        q.add_argument("--data", "-d", help=f"dataset directory holding {RADAR_FILE} and {IMU_FILE}")
        q.add_argument("--radar", help="radar CSV (overrides --data)")
        q.add_argument("--imu", help="IMU CSV (overrides --data)")
        q.add_argument("--config", "-c", help="key = value configuration file")
        q.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        q.add_argument("--out", "-o", required=True, help="output directory")

    r = sub.add_parser("run", help="estimate a trajectory")
    stream_args(r)
    r.add_argument("--mode", choices=modes, default=None, help="overrides the config mode")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE between two TUM trajectories")
    e.add_argument("estimate")
    e.add_argument("reference")
    e.add_argument("--tolerance", type=float, default=0.01, help="timestamp association tolerance, s")
    e.add_argument("--no-align", action="store_true", help="skip rigid alignment")
    e.add_argument("--json", help="write metrics and per-pose errors here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run every mode and compare ATE")
    stream_args(a)
    a.add_argument("--reference", help=f"ground-truth TUM file (default: DATA/{GT_FILE})")
    a.add_argument("--modes", nargs="+", choices=modes, default=modes)
    a.add_argument("--tolerance", type=float, default=0.01)
    a.set_defaults(func=cmd_ablate, mode=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"rio4d: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"rio4d: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except PipelineError as e:
        if isinstance(e.cause, DATA_ERRORS + (ValueError,)):
            print(f"rio4d: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
