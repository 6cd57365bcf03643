"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 stage failure,
4 calibration did not converge (the result is still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import pipeline
from .artifacts import read_detections, read_ground_truth, write_detections, write_frames
from .calib import format_result, read_result, write_result
from .config import PipelineConfig, load_config
from .errors import EvCalibError, ValidationError
from .events import load_events
from .plots import emit_plots
from .recon import import_frames

log = logging.getLogger("evcalib")

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE, EXIT_NOT_CONVERGED = 0, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-frame stages")
    p.add_argument("--seed", type=int, default=None, help="simulation seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="evcalib", description="Event-camera calibration via reconstructed frames.")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate event recordings with ground truth")

    p = sub.add_parser("reconstruct", parents=[common], help="events -> frames")
    p.add_argument("events", nargs="+", help="event file per camera (CSV or EVT1)")

    p = sub.add_parser("detect", parents=[common], help="frames -> detection file")
    p.add_argument("frames", nargs="+", help="frame directory per camera")

    p = sub.add_parser("calibrate", parents=[common], help="detection files -> calibration")
    p.add_argument("detections", nargs="+", help="detection file per camera (1 or 2)")

    p = sub.add_parser("report", parents=[common], help="calibration(s) -> report and plots")
    p.add_argument("calibrations", nargs="+", help="calibration.yaml; several for a repeated-run stereo summary")
    p.add_argument("--detections", nargs="*", default=[], help="detection file per camera")
    p.add_argument("--gt", nargs="*", default=[], help="ground-truth file per camera")

    p = sub.add_parser("run", parents=[common], help="fused pipeline")
    p.add_argument("events", nargs="*", help="event file per camera")
    p.add_argument("--gt", nargs="*", default=[], help="ground-truth file per camera")
    return ap


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    return cfg


def _out(args, cfg) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args, cfg) -> int:
    out = _out(args, cfg)
    files = pipeline.simulate_scenario(cfg, out, seed=args.seed)
    for p in files["events"] + files["ground_truth"]:
        print(p)
    return EXIT_OK


def cmd_reconstruct(args, cfg) -> int:
    out = _out(args, cfg)
    for k, path in enumerate(args.events):
        stream = pipeline.run_stage("load", load_events, path)
        frames = pipeline.run_stage("reconstruct", pipeline.reconstruct, cfg, stream, k)
        write_frames(frames, os.path.join(out, f"cam{k}", "frames"))
        print(f"camera {k}: {len(frames)} frames")
    return EXIT_OK


def cmd_detect(args, cfg) -> int:
    out = _out(args, cfg)
    for k, d in enumerate(args.frames):
        frames = pipeline.run_stage("detect", import_frames, d)
        ds = pipeline.run_stage("detect", pipeline.detect_frames, cfg, frames, args.threads)
        cam_dir = os.path.join(out, f"cam{k}")
        os.makedirs(cam_dir, exist_ok=True)
        write_detections(ds, os.path.join(cam_dir, "detections.txt"))
        emit_plots(None, None, cam_dir, coverage=[pipeline.coverage_of(ds)])
        print(f"camera {k}: {len(ds.detections)} of {ds.attempted} frames detected")
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    out = _out(args, cfg)
    if len(args.detections) > 2:
        raise ValidationError("at most two cameras are supported")
    sets = [pipeline.run_stage("calibrate", read_detections, p) for p in args.detections]
    result = pipeline.run_stage("calibrate", pipeline.calibrate_sets, cfg, sets)
    write_result(result, os.path.join(out, "calibration.yaml"))
    text = format_result(result)
    with open(os.path.join(out, "calibration.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_report(args, cfg) -> int:
    out = _out(args, cfg)
    results = [pipeline.run_stage("report", read_result, p) for p in args.calibrations]
    sets = [pipeline.run_stage("report", read_detections, p) for p in args.detections]
    gts = [pipeline.run_stage("report", read_ground_truth, p) for p in args.gt]
    main = results[0]
    if sets:
        main.detections = [ds.detections for ds in sets[: main.n_cameras]]
    rep = pipeline.build_report(cfg, sets, main, gts or None)
    pipeline.write_report(rep, out)
    deviations = None
    if len(results) > 1 and len(gts) > 1:
        t_gt = gts[1].extrinsic.translation
        deviations = [float(np.linalg.norm(r.extrinsics[1].translation - t_gt)) for r in results if r.n_cameras > 1]
    emit_plots(rep, main, out, coverage=[pipeline.coverage_of(ds) for ds in sets], stereo_deviations=deviations)
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    out = _out(args, cfg)
    rep, result = pipeline.run_pipeline(cfg, args.events, out, gt_files=args.gt or None, threads=args.threads)
    sys.stdout.write(rep.to_text())
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "detect": cmd_detect,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EvCalibError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
