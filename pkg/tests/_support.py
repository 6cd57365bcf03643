"""Shared scenarios and oracles for the test suite.

Closed-loop scenarios are expensive (tens of seconds each), so they are
built once per session and cached here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from evcalib.calib import CalibrationResult, calibrate_camera, calibrate_stereo, match_views
from evcalib.camera import CameraModel
from evcalib.detect import Detection, detect_checkerboard
from evcalib.errors import NotFound
from evcalib.geometry import Pose
from evcalib.recon import Frame, reconstruct_stream
from evcalib.simulator import (
    BoardSpec,
    SimConfig,
    calibration_trajectory,
    generate_events,
    stereo_extrinsic,
    transform_trajectory,
)

SENSOR = (500, 500)
GT_DIST = {
    "pinhole_none": (0.0, 0.0, 0.0, 0.0),
    "pinhole_radtan": (-0.383, 0.189, -0.001, -0.001),
    "pinhole_equi": (-0.051, 0.046, -0.083, 0.056),
}
WINDOW_US = 50_000

# every calibration result produced by a closed-loop fixture, for the
# cost-monotonicity check
RESULTS_SEEN: list[CalibrationResult] = []
# (criterion number) -> (passed, detail) for the terminal summary
CRITERIA: dict[int, tuple[bool, str]] = {}


def gt_camera(model: str, sensor=SENSOR) -> CameraModel:
    return CameraModel(model, 200.0, 200.0, 250.0, 250.0, np.array(GT_DIST[model]), sensor)


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def analytic_detections(camera, board, poses, times, sigma=0.0, rng=None, T=None):
    """Exact projections of the board (plus optional Gaussian pixel noise)."""
    bp = board.board_points()
    out = []
    for ts, p in zip(times, poses):
        pose = p if T is None else T.compose(p)
        uv = camera.project(pose, bp.reshape(-1, 3)).reshape(board.rows, board.cols, 2)
        if sigma > 0:
            uv = uv + rng.normal(0.0, sigma, uv.shape)
        out.append(Detection(int(ts), uv, bp, 1.0))
    return out


def detect_all(frames, board):
    dets, rejects = [], []
    for f in frames:
        try:
            dets.append(detect_checkerboard(f, board))
        except NotFound as exc:
            rejects.append((f.timestamp, exc.reason))
    return dets, rejects


@dataclass
class ClosedLoop:
    camera: CameraModel
    board: BoardSpec
    traj: object
    sim: object
    frames: list
    detections: list
    rejects: list
    gt_detections: list
    result: CalibrationResult
    timings: dict = field(default_factory=dict)

    @property
    def view_poses(self):
        return list(self.traj.poses[1:])

    @property
    def view_times(self):
        return list(self.traj.times[1:])


def run_closed_loop(model: str, n_views: int = 60, seed: int = 1, board: BoardSpec | None = None) -> ClosedLoop:
    """Simulate, reconstruct, detect and calibrate one noiseless camera."""
    cam = gt_camera(model)
    board = board or BoardSpec()
    timings = {}
    t = time.perf_counter()
    traj = calibration_trajectory(cam, board, n_views, seed=seed)
    sim = generate_events(SimConfig(cam), board, traj)
    timings["simulate"] = time.perf_counter() - t
    t = time.perf_counter()
    frames = reconstruct_stream(sim.stream, WINDOW_US, t_stop=traj.t_last)
    dets, rejects = detect_all(frames, board)
    gt_frames = [Frame(f.timestamp, f.image, "ground_truth") for f in sim.frames if f.timestamp > 0]
    gt_dets, _ = detect_all(gt_frames, board)
    timings["reconstruct_detect"] = time.perf_counter() - t
    t = time.perf_counter()
    result = calibrate_camera(dets, model, SENSOR)
    timings["calibrate"] = time.perf_counter() - t
    RESULTS_SEEN.append(result)
    return ClosedLoop(cam, board, traj, sim, frames, dets, rejects, gt_dets, result, timings)


_CLOSED_LOOPS: dict[str, ClosedLoop] = {}


def closed_loop(model: str) -> ClosedLoop:
    if model not in _CLOSED_LOOPS:
        _CLOSED_LOOPS[model] = run_closed_loop(model)
    return _CLOSED_LOOPS[model]


# --- stereo ---------------------------------------------------------------------

STEREO_BOARD = BoardSpec(square_size=0.08)
STEREO_DEPTH = (0.8, 1.4)


def stereo_trajectory(camera, n_views: int, seed: int):
    T = stereo_extrinsic(0.51, 1.1)
    traj = calibration_trajectory(
        camera, STEREO_BOARD, n_views, seed=seed, extra_cameras=[(camera, T)], depth_range=STEREO_DEPTH
    )
    return T, traj


def stereo_from_detections(dets_a, dets_b, model):
    ra = calibrate_camera(dets_a, model, SENSOR)
    rb = calibrate_camera(dets_b, model, SENSOR)
    st = calibrate_stereo(ra, rb, match_views(dets_a, dets_b, WINDOW_US))
    RESULTS_SEEN.extend([ra, rb, st])
    return st


def stereo_event_run(model: str = "pinhole_radtan", n_views: int = 30, seed: int = 5):
    """Full event pipeline on a simulated two-camera rig, noiseless."""
    cam = gt_camera(model)
    T, traj = stereo_trajectory(cam, n_views, seed)
    sets = []
    for tr in (traj, transform_trajectory(traj, T)):
        sim = generate_events(SimConfig(cam), STEREO_BOARD, tr)
        frames = reconstruct_stream(sim.stream, WINDOW_US, t_stop=tr.t_last)
        sets.append(detect_all(frames, STEREO_BOARD)[0])
    return T, stereo_from_detections(sets[0], sets[1], model), sets


def chi2_rms(n_res: int, n_params: int, sigma: float) -> float:
    """Expected per-component RMS of least-squares residuals under i.i.d. noise."""
    return sigma * np.sqrt((n_res - n_params) / n_res)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    dR = a.R.T @ b.R
    ang = float(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0)))
    return ang, float(np.linalg.norm(a.translation - b.translation))


# --- Jacobian oracle ------------------------------------------------------------


def random_camera(model: str, rng) -> CameraModel:
    base = np.array(GT_DIST[model])
    dist = base + (rng.normal(0.0, 0.02, 4) if model != "pinhole_none" else 0.0)
    f = rng.uniform(150, 400, 2)
    c = rng.uniform(200, 300, 2)
    return CameraModel(model, f[0], f[1], c[0], c[1], dist, SENSOR)


def random_triple(model: str, rng):
    cam = random_camera(model, rng)
    pose = Pose.from_rotvec(rng.normal(0.0, 0.5, 3), rng.uniform([-0.2, -0.2, 0.5], [0.2, 0.2, 1.5]))
    # board-frame point whose camera-frame ray stays within about 45 degrees of the optical axis
    direction = np.array([*rng.uniform(-0.7, 0.7, 2), 1.0])
    Xc = direction * rng.uniform(0.4, 2.0)
    X = pose.inverse().apply(Xc[None])[0]
    return cam, pose, X


def _relerr(A, B) -> float:
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(B), 1.0))


def jacobian_errors(cam: CameraModel, pose: Pose, X) -> dict:
    """Norm-wise relative error of analytic vs central-difference Jacobians.

    Blocks: camera parameters, pose increment (left, rotation then
    translation, as used by the solver) and the board point.
    """
    uv, J_X, J_p = cam.project(pose, X[None], jacobians=True)
    J_X, J_p = J_X[0], J_p[0]
    RX = pose.R @ X
    S = np.array([[0.0, -RX[2], RX[1]], [RX[2], 0.0, -RX[0]], [-RX[1], RX[0], 0.0]])
    J_pose = np.hstack([-J_X @ S, J_X])
    J_pt = J_X @ pose.R

    def fd(f, x0, h):
        cols = []
        for i in range(len(x0)):
            e = np.zeros(len(x0))
            e[i] = h[i]
            cols.append((f(x0 + e) - f(x0 - e)) / (2 * h[i]))
        return np.column_stack(cols)

    p0 = cam.params
    fd_p = fd(lambda p: cam.with_params(p).project(pose, X[None])[0], p0, 1e-6 * np.maximum(np.abs(p0), 1.0))
    fd_pose = fd(lambda d: cam.project(pose.retract(d), X[None])[0], np.zeros(6), np.full(6, 1e-6))
    fd_pt = fd(lambda x: cam.project(pose, x[None])[0], X, np.full(3, 1e-6))
    return {"params": _relerr(J_p, fd_p), "pose": _relerr(J_pose, fd_pose), "point": _relerr(J_pt, fd_pt)}


# --- reconstruction closure -------------------------------------------------------


def closure_excess(sim, C: float) -> tuple[float, int]:
    """Largest ``|C * sum(p) - (L(t_f) - L(0))| - C`` over pixels and GT frame times.

    Requires a simulation run with ``keep_log_frames``.  Returns the excess
    and the number of frames checked.
    """
    from evcalib.recon import ReconState, integrate_chunk

    w, h = sim.stream.sensor_size
    L0 = sim.initial_log.astype(np.float64)
    state = ReconState.zeros((w, h))
    t = sim.stream.t
    lo = 0
    worst = -np.inf
    for f in sim.frames:
        hi = int(np.searchsorted(t, np.uint64(f.timestamp), side="left"))
        integrate_chunk(state, sim.stream.events[lo:hi], C)
        lo = hi
        dL = f.log_intensity.astype(np.float64) - L0
        worst = max(worst, float(np.max(np.abs(state.log_intensity - dL))) - C)
    return worst, len(sim.frames)
