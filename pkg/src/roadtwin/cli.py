"""Command-line interface.

Subcommands mirror the pipeline stages; `pipeline` runs them all.  Exit
codes: 0 success, 2 configuration problem, 3 malformed detection record,
4 missing sensor stream, 5 no overlapping time range in evaluation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io
from .config import (
    ConfigError,
    config_to_dict,
    default_config,
    load_config,
)
from .evaluation import NoTwinFrame
from .pipeline import (
    gt_to_eval,
    run_evaluate,
    run_fuse,
    run_pipeline,
    run_simulate,
    run_track,
)

EXIT_CONFIG = 2
EXIT_MALFORMED = 3
EXIT_MISSING_STREAM = 4
EXIT_NO_OVERLAP = 5


def _load(args):
    if getattr(args, "config", None):
        return load_config(args.config, seed=getattr(args, "seed", None))
    cfg = default_config(seed=args.seed if getattr(args, "seed", None) is not None else 42)
    cfg.validate()
    return cfg


def _add_config_args(p, seed=True):
    p.add_argument("--config", help="pipeline config JSON (defaults to the built-in layout)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="master seed override")


def format_summary(report) -> str:
    def fmt(value, unit=""):
        if value is None:
            return "-"
        if unit == "%":
            return f"{100.0 * value:.2f} %"
        return f"{value:.2f} {unit}".strip()

    header = f"{'RMSE':>8}  {'RMSE_x':>8}  {'RMSE_y':>8}  {'Precision':>10}  {'Recall':>8}"
    row = (f"{fmt(report.rmse, 'm'):>8}  {fmt(report.rmse_x, 'm'):>8}  "
           f"{fmt(report.rmse_y, 'm'):>8}  {fmt(report.precision, '%'):>10}  "
           f"{fmt(report.recall, '%'):>8}")
    lines = [header, row,
             f"p50 {fmt(report.p50, 'm')} | p95 {fmt(report.p95, 'm')} | "
             f"TP {report.tp} FP {report.fp} FN {report.fn}"]
    if report.recall_interior is not None:
        lines.append(f"interior recall ({report.boundary_width:.0f} m band excluded): "
                     f"{fmt(report.recall_interior, '%')}")
    return "\n".join(lines)


def cmd_init_config(args) -> int:
    cfg = default_config(seed=args.seed if args.seed is not None else 42)
    text = json.dumps(config_to_dict(cfg), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    cfg.validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt_frames, det_frames = run_simulate(cfg)
    n_gt = io.write_jsonl(str(out / "ground_truth.jsonl"),
                          (r for f in gt_frames for r in io.ground_truth_records(f)))
    n_det = io.write_jsonl(str(out / "detections.jsonl"),
                           (r for f in det_frames for r in io.detection_records(f)))
    print(f"wrote {n_gt} ground-truth records, {n_det} detections to {out}")
    return 0


def cmd_track(args) -> int:
    cfg = _load(args)
    cfg.validate()
    if args.mp not in cfg.mp_ids():
        raise ConfigError(f"measurement point {args.mp} not in config {cfg.mp_ids()}")
    sensors = {s.sensor_id: s for s in cfg.sensors}
    det_frames = io.load_detection_frames(args.detections, sensors)
    records = run_track(cfg, det_frames, mp_id=args.mp, threads=args.threads)
    n = io.write_jsonl(args.out, records)
    print(f"wrote {n} confirmed-track records to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _load(args)
    cfg.validate()
    sensor_mp = {s.sensor_id: s.mp_id for s in cfg.sensors}
    groups = io.load_track_frames(args.tracks)
    covered = set()
    for (_, sensor_id), _records in groups.items():
        if sensor_id not in sensor_mp:
            raise ConfigError(f"unknown sensor {sensor_id!r} in track files")
        covered.add(sensor_mp[sensor_id])
    missing = set(cfg.mp_ids()) - covered
    if len(args.tracks) < len(cfg.mp_ids()) or missing:
        print(f"error: missing sensor stream for measurement point(s) "
              f"{sorted(missing) or '(empty input)'}", file=sys.stderr)
        return EXIT_MISSING_STREAM
    twin_frames = run_fuse(cfg, groups, threads=args.threads)
    n = io.write_jsonl(args.out, (r for f in twin_frames for r in io.twin_records(f)))
    print(f"wrote {n} twin records to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    cfg.validate()
    gt_eval = io.load_eval_frames(args.truth, "truth")
    twin_eval = io.load_eval_frames(args.twin, "twin")
    report = run_evaluate(cfg, gt_eval, twin_eval,
                          boundary_width=args.exclude_boundary)
    io.write_report(args.report, report)
    error_map_path = args.error_map or str(Path(args.report).with_name("error_map.csv"))
    io.write_error_map_csv(error_map_path, report)
    print(format_summary(report))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    report, manifest = run_pipeline(cfg, args.out_dir, threads=args.threads,
                                    boundary_width=args.exclude_boundary)
    print(format_summary(report))
    print(f"artifacts in {args.out_dir} (config {manifest['config_hash'][:12]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadtwin",
        description="simulated roadside perception pipeline and its evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default config as JSON")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("simulate", help="generate ground truth and detections")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the per-sensor trackers of one measurement point")
    _add_config_args(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--mp", type=int, required=True, help="measurement point id")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("fuse", help="fuse per-sensor tracks into the digital twin")
    _add_config_args(p)
    p.add_argument("--tracks", nargs="+", required=True,
                   help="one tracks.jsonl per measurement point")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="compare the twin against ground truth")
    _add_config_args(p, seed=False)
    p.add_argument("--truth", required=True)
    p.add_argument("--twin", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--error-map", default=None)
    p.add_argument("--exclude-boundary", type=float, nargs="?", const=10.0,
                   default=None, metavar="M",
                   help="also report recall with an M-meter boundary band excluded "
                        "(default 10 when given without a value)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage and print the summary")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--exclude-boundary", type=float, nargs="?", const=10.0,
                   default=None, metavar="M")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except io.MalformedRecord as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MALFORMED
    except NoTwinFrame as err:
        print(f"error: no overlapping time range: {err}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
