"""Checkerboard renderer and contrast-threshold event generator.

A pixel fires an event every time its log intensity moves a full
threshold ``C`` away from the reference level stored at its last event;
the reference then steps by ``p * C``.  Log intensity is rendered at
``render_rate`` and linearly interpolated in between to time-stamp the
crossings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .camera import CameraModel
from .errors import DegeneratePose, OutOfRange, ValidationError
from .events import EVENT_DTYPE, EventStream
from .geometry import Pose, interpolate_pose, quat_from_rotvec, quat_multiply

logger = logging.getLogger(__name__)

I_DARK = 0.1
I_LIGHT = 0.9
I_BACKGROUND = 0.5


@dataclass(frozen=True)
class BoardSpec:
    """Checkerboard with ``rows`` x ``cols`` interior corners.

    Board frame: corner (i, j) sits at ``(j * square_size, i * square_size, 0)``.
    The square diagonally outside corner (0, 0) is light.  ``margin`` light
    squares of border surround the checker area.
    """

    rows: int = 6
    cols: int = 9
    square_size: float = 0.04
    margin: float = 1.0

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise ValidationError("board needs at least 3x3 interior corners")
        if self.square_size <= 0:
            raise ValidationError("square_size must be positive")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        if self.rows == self.cols:
            logger.warning("square board: orientation is ambiguous for detection")

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols

    def board_points(self) -> np.ndarray:
        """Interior corners as a (rows, cols, 3) array."""
        i, j = np.mgrid[0 : self.rows, 0 : self.cols]
        s = self.square_size
        return np.stack([j * s, i * s, np.zeros_like(i, dtype=float)], axis=-1).astype(float)

    @property
    def center(self) -> np.ndarray:
        s = self.square_size
        return np.array([(self.cols - 1) * s / 2, (self.rows - 1) * s / 2, 0.0])

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the printed area including the margin."""
        s = self.square_size
        m = self.margin
        return (-s * (1 + m), s * (self.cols + m), -s * (1 + m), s * (self.rows + m))

    def outline(self, n_per_side: int = 16) -> np.ndarray:
        """Points along the outer border of the printed area, (N, 3)."""
        x0, x1, y0, y1 = self.extent()
        u = np.linspace(0.0, 1.0, n_per_side, endpoint=False)
        pts = np.concatenate(
            [
                np.column_stack([x0 + (x1 - x0) * u, np.full_like(u, y0)]),
                np.column_stack([np.full_like(u, x1), y0 + (y1 - y0) * u]),
                np.column_stack([x1 - (x1 - x0) * u, np.full_like(u, y1)]),
                np.column_stack([np.full_like(u, x0), y1 - (y1 - y0) * u]),
            ]
        )
        return np.column_stack([pts, np.zeros(len(pts))])

    def intensity(self, X, Y) -> np.ndarray:
        """Linear reflectance at board coordinates (background off the board)."""
        s = self.square_size
        x0, x1, y0, y1 = self.extent()
        a = np.floor(X / s)
        b = np.floor(Y / s)
        in_checker = (a >= -1) & (a <= self.cols - 1) & (b >= -1) & (b <= self.rows - 1)
        on_board = (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)
        dark = in_checker & ((a + b) % 2 == 1)
        out = np.full(np.shape(X), I_BACKGROUND)
        out[on_board] = I_LIGHT
        out[dark] = I_DARK
        return out


@dataclass(frozen=True)
class Trajectory:
    """Pose control points (board -> camera), timestamps in microseconds."""

    times: tuple[int, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self):
        if len(self.times) != len(self.poses) or not self.times:
            raise ValidationError("trajectory needs matching, non-empty times and poses")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValidationError("trajectory timestamps must be strictly increasing")

    @property
    def t_first(self) -> int:
        return self.times[0]

    @property
    def t_last(self) -> int:
        return self.times[-1]


def sample_pose(traj: Trajectory, t) -> Pose:
    """Pose at time ``t``: lerp in translation, slerp in rotation."""
    if t < traj.t_first or t > traj.t_last:
        raise OutOfRange(f"t={t} outside trajectory [{traj.t_first}, {traj.t_last}]")
    k = int(np.searchsorted(traj.times, t, side="right")) - 1
    if traj.times[k] == t or k == len(traj.times) - 1:
        return traj.poses[k]
    t0, t1 = traj.times[k], traj.times[k + 1]
    return interpolate_pose(traj.poses[k], traj.poses[k + 1], (t - t0) / (t1 - t0))


@dataclass(frozen=True)
class SimConfig:
    camera: CameraModel
    contrast_threshold: float = 0.3
    render_rate: float = 200.0
    frame_rate: float = 20.0
    threshold_sigma: float = 0.0
    background_rate: float = 0.0
    seed: int = 0
    supersample: int = 4
    keep_log_frames: bool = False

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValidationError("contrast threshold must be positive")
        if self.render_rate < 10 * self.frame_rate:
            raise ValidationError("render_rate must be at least 10x frame_rate")
        ratio = self.render_rate / self.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError("render_rate must be an integer multiple of frame_rate")
        if abs(1e6 / self.render_rate - round(1e6 / self.render_rate)) > 1e-9:
            raise ValidationError("render period must be a whole number of microseconds")

    @property
    def render_period_us(self) -> int:
        return int(round(1e6 / self.render_rate))

    @property
    def frame_period_us(self) -> int:
        return int(round(1e6 / self.frame_rate))


# --- rendering -----------------------------------------------------------------


class Renderer:
    """Caches per-pixel viewing rays of a camera for repeated rendering."""

    def __init__(self, camera: CameraModel, supersample: int = 4):
        self.camera = camera
        self.supersample = int(supersample)
        w, h = camera.sensor_size
        self.shape = (h, w)
        v, u = np.mgrid[0:h, 0:w].astype(float)
        uv = np.column_stack([u.ravel(), v.ravel()])
        rays, ok = camera.unproject_pixels(uv)
        eps = 0.25
        ru_p, ok1 = camera.unproject_pixels(uv + [eps, 0])
        ru_m, ok2 = camera.unproject_pixels(uv - [eps, 0])
        rv_p, ok3 = camera.unproject_pixels(uv + [0, eps])
        rv_m, ok4 = camera.unproject_pixels(uv - [0, eps])
        self.ok = ok & ok1 & ok2 & ok3 & ok4
        self.rays = np.where(self.ok[:, None], rays, np.array([0.0, 0.0, 1.0]))
        self.d_du = np.where(self.ok[:, None], (ru_p - ru_m) / (2 * eps), 0.0)
        self.d_dv = np.where(self.ok[:, None], (rv_p - rv_m) / (2 * eps), 0.0)
        s = self.supersample
        offs = (np.arange(s) + 0.5) / s - 0.5
        ou, ov = np.meshgrid(offs, offs)
        self.sub_offsets = np.column_stack([ou.ravel(), ov.ravel()])

    def _board_coords(self, rays, R, t):
        n = R[:, 2]
        nt = float(n @ t)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = nt / denom
        valid = np.isfinite(lam) & (lam > 0)
        P = (lam[:, None] * rays - t) @ R  # R^T (lam d - t), row form
        return P[:, 0], P[:, 1], valid

    def render_intensity(self, board: BoardSpec, pose: Pose) -> np.ndarray:
        R, t = pose.R, pose.translation
        if abs(float(R[:, 2] @ t)) < 1e-9:
            raise DegeneratePose("board plane passes through the optical center")
        if float((R @ board.center + t)[2]) <= 0:
            raise DegeneratePose("board is behind the camera")
        X, Y, valid = self._board_coords(self.rays, R, t)
        valid &= self.ok
        I = board.intensity(X, Y)
        I[~valid] = I_BACKGROUND
        h, w = self.shape
        img = I.reshape(h, w)
        if self.supersample <= 1:
            return img
        # class labels: pixels whose 8-neighbourhood disagrees straddle an edge
        lab = np.where(valid, np.round(I * 10).astype(np.int8), -1).reshape(h, w)
        edge = np.zeros((h, w), dtype=bool)
        pad = np.pad(lab, 1, mode="edge")
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx or dy:
                    edge |= pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] != lab
        idx = np.flatnonzero(edge.ravel())
        if idx.size:
            ns = len(self.sub_offsets)
            base = self.rays[idx]
            sub = (
                base[:, None, :]
                + self.sub_offsets[None, :, 0, None] * self.d_du[idx][:, None, :]
                + self.sub_offsets[None, :, 1, None] * self.d_dv[idx][:, None, :]
            ).reshape(-1, 3)
            Xs, Ys, vs = self._board_coords(sub, R, t)
            Is = board.intensity(Xs, Ys)
            Is[~vs] = I_BACKGROUND
            Is[~np.repeat(self.ok[idx], ns)] = I_BACKGROUND
            img = img.copy()
            img.ravel()[idx] = Is.reshape(-1, ns).mean(axis=1)
        return img

    def render_log(self, board: BoardSpec, pose: Pose) -> np.ndarray:
        return np.log(self.render_intensity(board, pose))


@lru_cache(maxsize=4)
def _cached_renderer(key, camera_dict_items, supersample):
    return Renderer(CameraModel.from_dict(dict(camera_dict_items)), supersample)


def get_renderer(camera: CameraModel, supersample: int = 4) -> Renderer:
    d = camera.to_dict()
    key = (d["model"], d["fx"], d["fy"], d["cx"], d["cy"], tuple(d["dist"]), tuple(d["sensor_size"]))
    items = tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items())
    return _cached_renderer(key, items, int(supersample))


def render_log_intensity(board: BoardSpec, camera: CameraModel, pose: Pose, supersample: int = 4) -> np.ndarray:
    """Log intensity image (height, width) of the board seen through ``camera``."""
    return get_renderer(camera, supersample).render_log(board, pose)


def intensity_to_u8(I) -> np.ndarray:
    return np.clip(np.round(np.asarray(I) * 255.0), 0, 255).astype(np.uint8)


# --- event generation ------------------------------------------------------------


@dataclass
class GroundTruthFrame:
    timestamp: int
    pose: Pose
    image: np.ndarray  # uint8 linear intensity
    log_intensity: np.ndarray | None = None


@dataclass
class SimulationResult:
    stream: EventStream
    frames: list[GroundTruthFrame]
    camera: CameraModel
    board: BoardSpec
    contrast_threshold: float
    initial_log: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def frame_times(self) -> list[int]:
        return [f.timestamp for f in self.frames]

    @property
    def poses(self) -> list[Pose]:
        return [f.pose for f in self.frames]


def crossing_events(L_prev, L_next, L_ref, C, t_prev, t_next):
    """Noiseless threshold crossings of one render interval.

    Arrays are flat per-pixel.  Returns (pixel index, time, polarity) arrays
    in pixel-major order and updates ``L_ref`` in place.
    """
    diff = L_next - L_ref
    n = np.floor(np.abs(diff) / C + 1e-9).astype(np.int64)
    hit = np.flatnonzero(n > 0)
    if hit.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.float64), np.empty(0, np.int8)
    counts = n[hit]
    sign = np.sign(diff[hit])
    pix = np.repeat(hit, counts)
    step = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    s = np.repeat(sign, counts)
    levels = L_ref[pix] + s * step * C
    a = L_prev[pix]
    b = L_next[pix]
    frac = np.clip((levels - a) / (b - a), 0.0, 1.0)
    t = t_prev + frac * (t_next - t_prev)
    L_ref[hit] += sign * counts * C
    return pix, t, s.astype(np.int8)


def _noisy_crossings(L_prev, L_next, L_ref, thr_pos, thr_neg, C, sigma, rng, t_prev, t_next):
    pix_all, t_all, p_all = [], [], []
    while True:
        diff = L_next - L_ref
        up = diff >= thr_pos
        dn = -diff >= thr_neg
        hit = np.flatnonzero(up | dn)
        if hit.size == 0:
            break
        pos = up[hit]
        step = np.where(pos, thr_pos[hit], -thr_neg[hit])
        level = L_ref[hit] + step
        a = L_prev[hit]
        b = L_next[hit]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.clip(np.nan_to_num((level - a) / (b - a), nan=1.0), 0.0, 1.0)
        pix_all.append(hit)
        t_all.append(t_prev + frac * (t_next - t_prev))
        p_all.append(np.where(pos, 1, -1).astype(np.int8))
        L_ref[hit] = level
        fresh = np.maximum(rng.normal(C, sigma, hit.size), 0.1 * C)
        thr_pos[hit[pos]] = fresh[pos]
        thr_neg[hit[~pos]] = fresh[~pos]
    if not pix_all:
        return np.empty(0, np.int64), np.empty(0, np.float64), np.empty(0, np.int8)
    pix = np.concatenate(pix_all)
    t = np.concatenate(t_all)
    p = np.concatenate(p_all)
    order = np.lexsort((t, pix))  # pixel-major, time within pixel
    return pix[order], t[order], p[order]


def generate_events(config: SimConfig, board: BoardSpec, traj: Trajectory, t_span=None) -> SimulationResult:
    """Simulate events and ground-truth frames over ``t_span = (t0, t1)`` microseconds."""
    cam = config.camera
    t0, t1 = (traj.t_first, traj.t_last) if t_span is None else (int(t_span[0]), int(t_span[1]))
    if t0 < traj.t_first or t1 > traj.t_last or t1 <= t0:
        raise OutOfRange(f"t_span {(t0, t1)} outside trajectory support")
    renderer = get_renderer(cam, config.supersample)
    w, h = cam.sensor_size
    C = config.contrast_threshold
    dt = config.render_period_us
    rng = np.random.default_rng(config.seed)
    noisy = config.threshold_sigma > 0

    def render(t):
        pose = sample_pose(traj, t)
        try:
            return pose, renderer.render_intensity(board, pose)
        except DegeneratePose as exc:
            raise DegeneratePose(str(exc), timestamp=t) from None

    pose, I = render(t0)
    L_prev = np.log(I).ravel()
    L_ref = L_prev.copy()
    thr_pos = thr_neg = None
    if noisy:
        thr_pos = np.maximum(rng.normal(C, config.threshold_sigma, L_ref.size), 0.1 * C)
        thr_neg = np.maximum(rng.normal(C, config.threshold_sigma, L_ref.size), 0.1 * C)

    frames = [_gt_frame(t0, pose, I, config.keep_log_frames)]
    initial_log = L_prev.reshape(h, w).astype(np.float32) if config.keep_log_frames else None
    batches = []
    n_steps = 0
    t_prev = t0
    k = 0
    while t_prev < t1:
        k += 1
        t_next = min(t0 + k * dt, t1)
        pose, I = render(t_next)
        L_next = np.log(I).ravel()
        if noisy:
            pix, tc, pol = _noisy_crossings(
                L_prev, L_next, L_ref, thr_pos, thr_neg, C, config.threshold_sigma, rng, t_prev, t_next
            )
        else:
            pix, tc, pol = crossing_events(L_prev, L_next, L_ref, C, t_prev, t_next)
        # integer stamp: the microsecond tick in which the crossing happens
        ts = np.maximum(np.ceil(tc).astype(np.int64) - 1, t_prev)
        if config.background_rate > 0:
            m = rng.poisson(config.background_rate * (t_next - t_prev) * 1e-6 * w * h)
            if m:
                pix = np.concatenate([pix, rng.integers(0, w * h, m)])
                ts = np.concatenate([ts, rng.integers(t_prev, t_next, m)])
                pol = np.concatenate([pol, rng.choice(np.array([-1, 1], np.int8), m)])
        if pix.size:
            order = np.argsort(ts, kind="stable")
            batch = np.empty(pix.size, dtype=EVENT_DTYPE)
            batch["t"] = ts[order]
            batch["x"] = pix[order] % w
            batch["y"] = pix[order] // w
            batch["p"] = pol[order]
            batches.append(batch)
        L_prev = L_next
        t_prev = t_next
        n_steps += 1
        if (t_next - t0) % config.frame_period_us == 0:
            frames.append(_gt_frame(t_next, pose, I, config.keep_log_frames))
    events = np.concatenate(batches) if batches else np.empty(0, dtype=EVENT_DTYPE)
    stream = EventStream((w, h), events)
    stats = {"render_steps": n_steps, "events": int(len(events))}
    logger.info("simulated %d events over %d render steps", len(events), n_steps)
    return SimulationResult(stream, frames, cam, board, C, initial_log, stats)


def _gt_frame(t, pose, I, keep_log):
    log = np.log(I).astype(np.float32) if keep_log else None
    return GroundTruthFrame(int(t), pose, intensity_to_u8(I), log)


# --- scenario construction --------------------------------------------------------


def board_fully_visible(camera: CameraModel, pose: Pose, board: BoardSpec, border_px: float = 6.0) -> bool:
    pts = np.concatenate([board.outline(24), board.board_points().reshape(-1, 3)])
    Xc = pose.apply(pts)
    if np.any(Xc[:, 2] <= 0.05):
        return False
    uv = camera.project_points(Xc)
    w, h = camera.sensor_size
    inside = (uv[:, 0] >= border_px) & (uv[:, 0] <= w - 1 - border_px)
    inside &= (uv[:, 1] >= border_px) & (uv[:, 1] <= h - 1 - border_px)
    if not np.all(inside):
        return False
    # the inverse map must also see it: reject poses beyond the invertible range
    rays, ok = camera.unproject_pixels(uv)
    return bool(np.all(ok))


def min_square_size_px(camera: CameraModel, pose: Pose, board: BoardSpec) -> float:
    """Shortest image distance between grid-adjacent corners."""
    uv = camera.project_points(pose.apply(board.board_points().reshape(-1, 3))).reshape(board.rows, board.cols, 2)
    du = np.linalg.norm(np.diff(uv, axis=1), axis=2)
    dv = np.linalg.norm(np.diff(uv, axis=0), axis=2)
    return float(min(du.min(), dv.min()))


def random_view(
    camera: CameraModel,
    board: BoardSpec,
    rng: np.random.Generator,
    depth_range=(0.35, 0.7),
    max_tilt_deg: float = 40.0,
    max_roll_deg: float = 30.0,
    extra_cameras: Sequence[tuple[CameraModel, Pose]] = (),
    max_tries: int = 2000,
    min_square_px: float = 8.0,
) -> Pose:
    """Random board pose fully visible in ``camera`` (and every extra camera).

    ``extra_cameras`` holds ``(model, T_cam_from_ref)`` pairs.  Views whose
    smallest projected square edge is under ``min_square_px`` are redrawn.
    """
    w, h = camera.sensor_size
    for _ in range(max_tries):
        target = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
        ray, ok = camera.unproject_pixels(target[None])
        if not ok[0] or ray[0, 2] <= 0.2:
            continue
        depth = rng.uniform(*depth_range)
        center_cam = ray[0] / ray[0, 2] * depth
        # tilt = angle between board normal and line of sight, about a random axis
        tilt = np.deg2rad(rng.uniform(0.0, max_tilt_deg))
        axis_angle = rng.uniform(0.0, 2 * np.pi)
        roll = np.deg2rad(rng.uniform(-max_roll_deg, max_roll_deg))
        tilt_vec = tilt * np.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
        q = quat_multiply(quat_from_rotvec(tilt_vec), quat_from_rotvec([0.0, 0.0, roll]))
        # rotate the optical axis onto the viewing ray
        z = np.array([0.0, 0.0, 1.0])
        axis = np.cross(z, ray[0])
        angle = np.arctan2(np.linalg.norm(axis), float(z @ ray[0]))
        if angle > 1e-12:
            q = quat_multiply(quat_from_rotvec(axis / np.linalg.norm(axis) * angle), q)
        R = Pose(q, np.zeros(3)).R
        pose = Pose(q, center_cam - R @ board.center)
        if not board_fully_visible(camera, pose, board):
            continue
        if min_square_size_px(camera, pose, board) < min_square_px:
            continue
        if all(
            board_fully_visible(m, T.compose(pose), board) and min_square_size_px(m, T.compose(pose), board) >= min_square_px
            for m, T in extra_cameras
        ):
            return pose
    raise ValidationError("could not place a fully visible board view; relax the scenario")


def _order_views(camera, board, poses):
    """Greedy nearest-neighbour ordering on projected board centers."""
    centers = np.array([camera.project_points(p.apply(board.center[None]))[0] for p in poses])
    remaining = list(range(1, len(poses)))
    order = [0]
    while remaining:
        last = centers[order[-1]]
        j = min(remaining, key=lambda r: float(np.sum((centers[r] - last) ** 2)))
        remaining.remove(j)
        order.append(j)
    return [poses[i] for i in order]


def _blank_lead_in(camera, board, first: Pose, renderers) -> Pose:
    """A pose beside ``first`` from which no camera sees any of the board."""
    # the rotation is kept, so depth varies linearly on the way to ``first``
    # and a lead-in in front of every camera keeps the whole segment valid
    for offset in (2.0, 4.0, 8.0, 16.0, 32.0):
        for direction in ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]):
            pose = Pose(first.rotation, first.translation + offset * np.array(direction, float))
            try:
                if all(np.all(r.render_intensity(board, T.compose(pose)) == I_BACKGROUND) for r, T in renderers):
                    return pose
            except DegeneratePose:
                continue
    raise ValidationError("could not find an empty lead-in view")


def calibration_trajectory(
    camera: CameraModel,
    board: BoardSpec,
    n_views: int = 60,
    seed: int = 0,
    view_interval_us: int = 50_000,
    lead_in_us: int = 200_000,
    extra_cameras: Sequence[tuple[CameraModel, Pose]] = (),
    supersample: int = 4,
    **view_kwargs,
) -> Trajectory:
    """Trajectory through ``n_views`` random fully visible views.

    It starts from an empty view (board off to the side) so the first
    integrated frame carries no ghost of an initial board image.  View
    ``k`` is reached at ``lead_in_us + k * view_interval_us``.
    """
    rng = np.random.default_rng(seed)
    poses = [random_view(camera, board, rng, extra_cameras=extra_cameras, **view_kwargs) for _ in range(n_views)]
    poses = _order_views(camera, board, poses)
    renderers = [(get_renderer(camera, supersample), Pose.identity())]
    renderers += [(get_renderer(m, supersample), T) for m, T in extra_cameras]
    blank = _blank_lead_in(camera, board, poses[0], renderers)
    times = [0] + [lead_in_us + k * view_interval_us for k in range(n_views)]
    return Trajectory(tuple(times), tuple([blank] + poses))


def transform_trajectory(traj: Trajectory, T: Pose) -> Trajectory:
    """Same board motion seen from a camera at ``T`` (ref camera -> this camera)."""
    return Trajectory(traj.times, tuple(T.compose(p) for p in traj.poses))


def stereo_extrinsic(baseline: float = 0.51, convergence_depth: float = 1.1) -> Pose:
    """Camera-0 -> camera-1 transform for a rig displaced along +x by ``baseline``.

    Camera 1 is toed in so its optical axis crosses camera 0's at
    ``convergence_depth``.
    """
    center = np.array([baseline, 0.0, 0.0])
    yaw = -np.arctan2(baseline, convergence_depth)
    R = Pose.from_rotvec([0.0, yaw, 0.0], np.zeros(3)).R.T
    return Pose.from_matrix(R, -R @ center)
