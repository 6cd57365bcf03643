"""Pipeline configuration: a flat INI file (``key = value`` under ``[section]``).

Recognized sections and keys (all optional)::

    [sensor]          width, height
    [board]           rows, cols, square_size, margin
    [camera]          model
    [reconstruction]  mode (integrated | leaky | imported), window_us,
                      contrast_threshold, decay_tau_us, import_path
    [detection]       blur_sigma, min_contrast, min_symmetry
    [solver]          max_iterations, loss (squared | huber), huber_delta
    [output]          directory
    [simulation]      fx, fy, cx, cy, distortion (4 comma-separated values),
                      n_views, seed, render_rate, frame_rate, view_interval_us,
                      threshold_sigma, background_rate, depth_min, depth_max,
                      stereo_baseline (0 = single camera), convergence_depth
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .calib import SolverOptions
from .camera import MODELS, CameraModel
from .detect import DetectorOptions
from .errors import ValidationError, ZeroWindow
from .simulator import BoardSpec

RECON_MODES = ("integrated", "leaky", "imported")


@dataclass(frozen=True)
class SimulationSettings:
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 250.0
    cy: float = 250.0
    distortion: tuple = (0.0, 0.0, 0.0, 0.0)
    n_views: int = 60
    seed: int = 0
    render_rate: float = 200.0
    frame_rate: float = 20.0
    view_interval_us: int = 50_000
    threshold_sigma: float = 0.0
    background_rate: float = 0.0
    depth_min: float = 0.35
    depth_max: float = 0.7
    stereo_baseline: float = 0.0
    convergence_depth: float = 1.1


@dataclass(frozen=True)
class PipelineConfig:
    sensor_size: tuple[int, int] = (500, 500)
    window_us: int = 50_000
    reconstruction: str = "integrated"
    contrast_threshold: float = 0.3
    decay_tau_us: float = 1e6
    import_path: str | None = None
    board: BoardSpec = field(default_factory=BoardSpec)
    camera_model: str = "pinhole_none"
    solver: SolverOptions = field(default_factory=SolverOptions)
    detector: DetectorOptions = field(default_factory=DetectorOptions)
    output_dir: str = "out"
    simulation: SimulationSettings = field(default_factory=SimulationSettings)

    def validate(self, check_paths: bool = False) -> "PipelineConfig":
        if self.window_us <= 0:
            raise ZeroWindow(self.window_us)
        if self.reconstruction not in RECON_MODES:
            raise ValidationError(f"unknown reconstruction mode {self.reconstruction!r}")
        if self.camera_model not in MODELS:
            raise ValidationError(f"unknown camera model {self.camera_model!r}")
        if self.contrast_threshold <= 0:
            raise ValidationError("contrast_threshold must be positive")
        if self.reconstruction == "leaky" and self.decay_tau_us <= 0:
            raise ValidationError("decay_tau_us must be positive")
        if self.reconstruction == "imported":
            if not self.import_path:
                raise ValidationError("imported reconstruction needs import_path")
            if check_paths and not os.path.exists(self.import_path):
                raise ValidationError(f"import_path {self.import_path} does not exist")
        w, h = self.sensor_size
        if w <= 0 or h <= 0:
            raise ValidationError("sensor size must be positive")
        return self

    def gt_camera(self) -> CameraModel:
        s = self.simulation
        dist = np.zeros(4) if self.camera_model == "pinhole_none" else np.array(s.distortion, dtype=float)
        cam = CameraModel(self.camera_model, s.fx, s.fy, s.cx, s.cy, dist, self.sensor_size)
        cam.validate()
        return cam


def _floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Parse an INI file (or ``text``); missing keys keep their defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if text is not None:
        cp.read_string(text)
    elif path is not None:
        if not os.path.exists(path):
            raise ValidationError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
    base = PipelineConfig()
    try:
        return _from_parser(cp, base).validate()
    except (ValueError, configparser.Error) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad config: {exc}") from exc


def _from_parser(cp: configparser.ConfigParser, base: PipelineConfig) -> PipelineConfig:
    def get(section, key, conv, default):
        if cp.has_option(section, key):
            raw = cp.get(section, key).strip()
            return conv(raw) if raw != "" else default
        return default

    w = get("sensor", "width", int, base.sensor_size[0])
    h = get("sensor", "height", int, base.sensor_size[1])
    b = base.board
    board = BoardSpec(
        rows=get("board", "rows", int, b.rows),
        cols=get("board", "cols", int, b.cols),
        square_size=get("board", "square_size", float, b.square_size),
        margin=get("board", "margin", float, b.margin),
    )
    so = base.solver
    solver = SolverOptions(
        max_iterations=get("solver", "max_iterations", int, so.max_iterations),
        loss=get("solver", "loss", str, so.loss),
        huber_delta=get("solver", "huber_delta", float, so.huber_delta),
    )
    do = base.detector
    detector = replace(
        do,
        blur_sigma=get("detection", "blur_sigma", float, do.blur_sigma),
        min_contrast=get("detection", "min_contrast", float, do.min_contrast),
        min_symmetry=get("detection", "min_symmetry", float, do.min_symmetry),
    )
    s = base.simulation
    sim = SimulationSettings(
        fx=get("simulation", "fx", float, s.fx),
        fy=get("simulation", "fy", float, s.fy),
        cx=get("simulation", "cx", float, s.cx),
        cy=get("simulation", "cy", float, s.cy),
        distortion=get("simulation", "distortion", _floats, s.distortion),
        n_views=get("simulation", "n_views", int, s.n_views),
        seed=get("simulation", "seed", int, s.seed),
        render_rate=get("simulation", "render_rate", float, s.render_rate),
        frame_rate=get("simulation", "frame_rate", float, s.frame_rate),
        view_interval_us=get("simulation", "view_interval_us", int, s.view_interval_us),
        threshold_sigma=get("simulation", "threshold_sigma", float, s.threshold_sigma),
        background_rate=get("simulation", "background_rate", float, s.background_rate),
        depth_min=get("simulation", "depth_min", float, s.depth_min),
        depth_max=get("simulation", "depth_max", float, s.depth_max),
        stereo_baseline=get("simulation", "stereo_baseline", float, s.stereo_baseline),
        convergence_depth=get("simulation", "convergence_depth", float, s.convergence_depth),
    )
    if len(sim.distortion) != 4:
        raise ValidationError("simulation distortion needs exactly 4 values")
    return PipelineConfig(
        sensor_size=(w, h),
        window_us=get("reconstruction", "window_us", int, base.window_us),
        reconstruction=get("reconstruction", "mode", str, base.reconstruction),
        contrast_threshold=get("reconstruction", "contrast_threshold", float, base.contrast_threshold),
        decay_tau_us=get("reconstruction", "decay_tau_us", float, base.decay_tau_us),
        import_path=get("reconstruction", "import_path", str, base.import_path),
        board=board,
        camera_model=get("camera", "model", str, base.camera_model),
        solver=solver,
        detector=detector,
        output_dir=get("output", "directory", str, base.output_dir),
        simulation=sim,
    )


def dump_config(cfg: PipelineConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    s = cfg.simulation
    lines = [
        "[sensor]",
        f"width = {cfg.sensor_size[0]}",
        f"height = {cfg.sensor_size[1]}",
        "",
        "[board]",
        f"rows = {cfg.board.rows}",
        f"cols = {cfg.board.cols}",
        f"square_size = {cfg.board.square_size!r}",
        f"margin = {cfg.board.margin!r}",
        "",
        "[camera]",
        f"model = {cfg.camera_model}",
        "",
        "[reconstruction]",
        f"mode = {cfg.reconstruction}",
        f"window_us = {cfg.window_us}",
        f"contrast_threshold = {cfg.contrast_threshold!r}",
        f"decay_tau_us = {cfg.decay_tau_us!r}",
        f"import_path = {cfg.import_path or ''}",
        "",
        "[detection]",
        f"blur_sigma = {cfg.detector.blur_sigma!r}",
        f"min_contrast = {cfg.detector.min_contrast!r}",
        f"min_symmetry = {cfg.detector.min_symmetry!r}",
        "",
        "[solver]",
        f"max_iterations = {cfg.solver.max_iterations}",
        f"loss = {cfg.solver.loss}",
        f"huber_delta = {cfg.solver.huber_delta!r}",
        "",
        "[output]",
        f"directory = {cfg.output_dir}",
        "",
        "[simulation]",
    ]
    for name in SimulationSettings.__dataclass_fields__:
        val = getattr(s, name)
        if name == "distortion":
            val = ", ".join(repr(float(v)) for v in val)
        lines.append(f"{name} = {val!r}" if isinstance(val, float) else f"{name} = {val}")
    return "\n".join(lines) + "\n"
