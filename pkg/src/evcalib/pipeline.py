"""End-to-end pipeline: slice -> reconstruct -> detect -> calibrate -> report."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .artifacts import (
    DetectionSet,
    GroundTruth,
    read_ground_truth,
    write_detections,
    write_frames,
    write_ground_truth,
)
from .calib import CalibrationResult, calibrate_camera, calibrate_stereo, format_result, match_views, write_result
from .config import PipelineConfig
from .detect import CoverageMap, accumulate_coverage, detect_checkerboard, detection_ratio
from .errors import EvCalibError, ModelMismatch, NoCovisibility, NotFound, StageError, ValidationError
from .events import EventStream, load_events, write_binary
from .geometry import Pose
from .recon import Frame, ReconOptions, import_frames, reconstruct_stream
from .simulator import (
    SimConfig,
    calibration_trajectory,
    generate_events,
    get_renderer,
    intensity_to_u8,
    stereo_extrinsic,
    transform_trajectory,
)

log = logging.getLogger(__name__)


# --- report types ---------------------------------------------------------------


@dataclass(frozen=True)
class ParamDeviation:
    camera: int
    name: str
    estimate: float
    ground_truth: float
    abs_dev: float
    rel_dev: float | None  # None when the ground truth is 0
    percent: float | None


@dataclass
class DetectionSummary:
    camera: int
    attempted: int
    detected: int
    rejected: dict[str, int]
    gt_detected: int | None = None
    coverage_fraction: float = 0.0

    @property
    def ratio(self) -> float | None:
        if not self.gt_detected:
            return None
        return detection_ratio(self.detected, self.gt_detected)

    def consistent(self) -> bool:
        return self.attempted == self.detected + sum(self.rejected.values())


@dataclass
class RunReport:
    detection: list[DetectionSummary] = field(default_factory=list)
    rms_px: float | None = None
    converged: bool | None = None
    parameters: list[ParamDeviation] = field(default_factory=list)
    baseline_m: float | None = None
    baseline_gt_m: float | None = None
    translation_deviation_m: float | None = None

    def to_text(self) -> str:
        out = ["evcalib run report", ""]
        out.append("detection")
        for d in self.detection:
            rej = ", ".join(f"{k}={v}" for k, v in d.rejected.items()) or "none"
            out.append(f"  camera {d.camera}: attempted {d.attempted}, detected {d.detected}, rejected [{rej}]")
            if d.gt_detected is not None:
                ratio = "n/a" if d.ratio is None else f"{d.ratio:.3f}"
                out.append(f"    ground-truth detections {d.gt_detected}, success ratio {ratio}")
            out.append(f"    coverage {100.0 * d.coverage_fraction:.1f}% of cells")
        if self.rms_px is not None:
            out += ["", f"rms reprojection {self.rms_px:.6f} px, converged {'yes' if self.converged else 'no'}"]
        if self.baseline_m is not None:
            line = f"baseline {self.baseline_m:.6f} m"
            if self.baseline_gt_m is not None:
                line += f" (gt {self.baseline_gt_m:.6f} m, translation deviation {1000 * self.translation_deviation_m:.3f} mm)"
            out.append(line)
        if self.parameters:
            out += ["", "parameters (estimate vs ground truth)"]
            out.append(f"  {'cam':>3} {'name':>4} {'estimate':>14} {'gt':>14} {'abs dev':>12} {'dev %':>9}")
            for p in self.parameters:
                pct = "" if p.percent is None else f"{p.percent:.3f}"
                out.append(f"  {p.camera:>3} {p.name:>4} {p.estimate:>14.6f} {p.ground_truth:>14.6f} {p.abs_dev:>12.6f} {pct:>9}")
        return "\n".join(out) + "\n"

    def tables(self) -> dict[str, str]:
        """CSV text per table name."""
        tabs = {}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["camera", "attempted", "detected", "gt_detected", "ratio", "coverage_fraction", "rejected"])
        for d in self.detection:
            w.writerow(
                [
                    d.camera,
                    d.attempted,
                    d.detected,
                    "" if d.gt_detected is None else d.gt_detected,
                    "" if d.ratio is None else repr(d.ratio),
                    repr(d.coverage_fraction),
                    ";".join(f"{k}={v}" for k, v in d.rejected.items()),
                ]
            )
        tabs["detections"] = buf.getvalue()
        if self.parameters:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["camera", "name", "estimate", "ground_truth", "abs_dev", "rel_dev", "percent"])
            for p in self.parameters:
                w.writerow(
                    [
                        p.camera,
                        p.name,
                        repr(p.estimate),
                        repr(p.ground_truth),
                        repr(p.abs_dev),
                        "" if p.rel_dev is None else repr(p.rel_dev),
                        "" if p.percent is None else repr(p.percent),
                    ]
                )
            tabs["parameters"] = buf.getvalue()
        if self.rms_px is not None:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["rms_px", "converged", "baseline_m", "baseline_gt_m", "translation_deviation_m"])
            w.writerow(
                [
                    repr(self.rms_px),
                    int(bool(self.converged)),
                    "" if self.baseline_m is None else repr(self.baseline_m),
                    "" if self.baseline_gt_m is None else repr(self.baseline_gt_m),
                    "" if self.translation_deviation_m is None else repr(self.translation_deviation_m),
                ]
            )
            tabs["summary"] = buf.getvalue()
        return tabs


def compare_to_ground_truth(result: CalibrationResult, gt, camera: int = 0) -> list[ParamDeviation]:
    """Per-parameter deviation of ``result.cameras[camera]`` from a ground-truth model.

    ``gt`` is a :class:`GroundTruth`, a :class:`CameraModel` or a path.
    """
    if isinstance(gt, (str, os.PathLike)):
        gt = read_ground_truth(gt)
    gt_cam = gt.camera if isinstance(gt, GroundTruth) else gt
    est = result.cameras[camera]
    if est.model != gt_cam.model:
        raise ModelMismatch(f"estimated model {est.model} but ground truth is {gt_cam.model}")
    rows = []
    for name, e, g in zip(est.param_names, est.params, gt_cam.params):
        d = float(e - g)
        rel = d / g if g != 0 else None
        rows.append(ParamDeviation(camera, name, float(e), float(g), abs(d), rel, None if rel is None else 100.0 * abs(rel)))
    return rows


# --- stages ------------------------------------------------------------------------


def simulate_scenario(cfg: PipelineConfig, out_dir, seed: int | None = None) -> dict:
    """Simulate one (or two, with a stereo baseline) cameras; write events and ground truth."""
    s = cfg.simulation
    seed = s.seed if seed is None else int(seed)
    cam = cfg.gt_camera()
    extra = []
    T_10 = None
    if s.stereo_baseline > 0:
        T_10 = stereo_extrinsic(s.stereo_baseline, s.convergence_depth)
        extra = [(cam, T_10)]
    traj = calibration_trajectory(
        cam,
        cfg.board,
        n_views=s.n_views,
        seed=seed,
        view_interval_us=s.view_interval_us,
        extra_cameras=extra,
        depth_range=(s.depth_min, s.depth_max),
    )
    os.makedirs(out_dir, exist_ok=True)
    sim = SimConfig(
        cam,
        contrast_threshold=cfg.contrast_threshold,
        render_rate=s.render_rate,
        frame_rate=s.frame_rate,
        threshold_sigma=s.threshold_sigma,
        background_rate=s.background_rate,
        seed=seed,
    )
    outputs = {"events": [], "ground_truth": []}
    rigs = [(Pose.identity(), traj)]
    if T_10 is not None:
        rigs.append((T_10, transform_trajectory(traj, T_10)))
    for k, (T, tr) in enumerate(rigs):
        res = generate_events(sim, cfg.board, tr)
        ev_path = os.path.join(out_dir, f"events_cam{k}.evt")
        write_binary(res.stream, ev_path)
        gt = GroundTruth(cam, [(f.timestamp, f.pose) for f in res.frames], T, cfg.contrast_threshold)
        gt_path = os.path.join(out_dir, f"gt_cam{k}.txt")
        write_ground_truth(gt, gt_path)
        write_frames([Frame(f.timestamp, f.image, "ground_truth") for f in res.frames], os.path.join(out_dir, f"gt_frames_cam{k}"))
        outputs["events"].append(ev_path)
        outputs["ground_truth"].append(gt_path)
        log.info("camera %d: %d events, %d ground-truth frames", k, len(res.stream), len(res.frames))
    return outputs


def reconstruct(cfg: PipelineConfig, stream: EventStream | None, camera: int = 0, t_stop: int | None = None) -> list[Frame]:
    if cfg.reconstruction == "imported":
        src = cfg.import_path
        sub = os.path.join(src, f"cam{camera}")
        return import_frames(sub if os.path.isdir(sub) else src)
    opts = ReconOptions(mode=cfg.reconstruction, contrast_threshold=cfg.contrast_threshold, decay_tau_us=cfg.decay_tau_us)
    return reconstruct_stream(stream, cfg.window_us, opts, t0=0, t_stop=t_stop)


def detect_frames(cfg: PipelineConfig, frames: list[Frame], threads: int = 1, sensor_size=None) -> DetectionSet:
    """Detect on every frame; NotFound is counted, not raised."""

    def one(f):
        try:
            return detect_checkerboard(f, cfg.board, cfg.detector)
        except NotFound as exc:
            return (int(f.timestamp), exc.reason)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, frames))
    else:
        outcomes = [one(f) for f in frames]
    size = sensor_size or (frames[0].sensor_size if frames else cfg.sensor_size)
    ds = DetectionSet(cfg.board, tuple(size))
    for o in outcomes:
        if isinstance(o, tuple):
            ds.rejects.append(o)
        else:
            ds.detections.append(o)
    return ds


def coverage_of(ds: DetectionSet) -> CoverageMap:
    cov = CoverageMap(ds.sensor_size)
    for det in ds.detections:
        accumulate_coverage(cov, det)
    return cov


def render_ground_truth_frames(cfg: PipelineConfig, gt: GroundTruth) -> list[Frame]:
    r = get_renderer(gt.camera)
    return [Frame(int(t), intensity_to_u8(r.render_intensity(cfg.board, p)), "ground_truth") for t, p in gt.frames]


def calibrate_sets(cfg: PipelineConfig, sets: list[DetectionSet]) -> CalibrationResult:
    sizes = [ds.sensor_size for ds in sets]
    singles = [calibrate_camera(ds.detections, cfg.camera_model, sizes[k], cfg.solver) for k, ds in enumerate(sets)]
    if len(sets) == 1:
        return singles[0]
    pairs = match_views(sets[0].detections, sets[1].detections, cfg.window_us)
    if not pairs:
        raise NoCovisibility("no co-visible views between camera 0 and camera 1")
    return calibrate_stereo(singles[0], singles[1], pairs, cfg.solver)


def build_report(
    cfg: PipelineConfig,
    sets: list[DetectionSet],
    result: CalibrationResult | None,
    gts: list[GroundTruth] | None = None,
    gt_sets: list[DetectionSet] | None = None,
) -> RunReport:
    rep = RunReport()
    for k, ds in enumerate(sets):
        rep.detection.append(
            DetectionSummary(
                k,
                ds.attempted,
                len(ds.detections),
                ds.reject_counts(),
                None if not gt_sets else len(gt_sets[k].detections),
                coverage_of(ds).fraction_covered,
            )
        )
    if result is not None:
        rep.rms_px = result.rms_reprojection_px
        rep.converged = result.converged
        if result.n_cameras > 1:
            rep.baseline_m = result.baseline
        if gts:
            for k in range(min(len(gts), result.n_cameras)):
                rep.parameters += compare_to_ground_truth(result, gts[k], camera=k)
            if result.n_cameras > 1 and len(gts) > 1:
                t_gt = gts[1].extrinsic.translation
                rep.baseline_gt_m = float(np.linalg.norm(t_gt))
                rep.translation_deviation_m = float(np.linalg.norm(result.extrinsics[1].translation - t_gt))
    return rep


def write_report(rep: RunReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rep.to_text())
    for name, text in rep.tables().items():
        with open(os.path.join(out_dir, f"{name}.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValidationError:
        raise
    except (EvCalibError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(
    cfg: PipelineConfig,
    event_files,
    out_dir=None,
    gt_files=None,
    threads: int = 1,
    plots: bool = True,
) -> tuple[RunReport, CalibrationResult]:
    """Fused pipeline over one event file per camera (at most two cameras).

    Every intermediate artifact is written under ``out_dir``: frames per
    camera, detection files, the calibration result and the report.
    """
    cfg.validate(check_paths=True)
    out_dir = out_dir or cfg.output_dir
    event_files = list(event_files or [])
    n_cams = len(event_files) if cfg.reconstruction != "imported" else max(1, len(event_files), len(gt_files or []))
    if n_cams == 0:
        raise ValidationError("at least one event file is required")
    if n_cams > 2:
        raise ValidationError("at most two cameras are supported")
    for p in event_files:
        if not os.path.exists(p):
            raise ValidationError(f"event file {p} not found")
    gts = [run_stage("ground_truth", read_ground_truth, p) for p in gt_files] if gt_files else None
    os.makedirs(out_dir, exist_ok=True)

    sets, gt_sets = [], []
    for k in range(n_cams):
        cam_dir = os.path.join(out_dir, f"cam{k}")
        stream = run_stage("load", load_events, event_files[k]) if k < len(event_files) else None
        t_stop = None
        if gts and gts[k].frames:
            t_stop = max(t for t, _ in gts[k].frames)
        frames = run_stage("reconstruct", reconstruct, cfg, stream, k, t_stop)
        run_stage("reconstruct", write_frames, frames, os.path.join(cam_dir, "frames"))
        size = stream.sensor_size if stream is not None else None
        ds = run_stage("detect", detect_frames, cfg, frames, threads, size)
        write_detections(ds, os.path.join(cam_dir, "detections.txt"))
        sets.append(ds)
        if gts:
            gframes = run_stage("detect", render_ground_truth_frames, cfg, gts[k])
            gt_sets.append(run_stage("detect", detect_frames, cfg, gframes, threads, gts[k].camera.sensor_size))
            write_detections(gt_sets[-1], os.path.join(cam_dir, "gt_detections.txt"))

    result = run_stage("calibrate", calibrate_sets, cfg, sets)
    write_result(result, os.path.join(out_dir, "calibration.yaml"))
    with open(os.path.join(out_dir, "calibration.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_result(result))
    report = build_report(cfg, sets, result, gts, gt_sets or None)
    write_report(report, out_dir)
    if plots:
        from .plots import emit_plots

        emit_plots(report, result, out_dir, coverage=[coverage_of(ds) for ds in sets])
    return report, result
