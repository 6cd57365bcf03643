import numpy as np
import pytest

from _support import gt_camera
from evcalib.camera import CameraModel
from evcalib.errors import DegeneratePose, OutOfRange, ValidationError
from evcalib.geometry import Pose, quat_from_rotvec
from evcalib.simulator import (
    I_DARK,
    I_LIGHT,
    BoardSpec,
    SimConfig,
    Trajectory,
    calibration_trajectory,
    crossing_events,
    generate_events,
    get_renderer,
    min_square_size_px,
    board_fully_visible,
    render_log_intensity,
    sample_pose,
    stereo_extrinsic,
)

BOARD = BoardSpec()


def fronto(board, depth=0.5):
    return Pose(np.array([1.0, 0, 0, 0]), -board.center + [0.0, 0.0, depth])


def ramp_events(L_of_t, C, t1=1.0, dt=0.005):
    """Drive the crossing rule for one pixel over render samples of ``L_of_t``."""
    L_prev = np.array([L_of_t(0.0)])
    L_ref = L_prev.copy()
    times, pols = [], []
    k = 0
    while k * dt < t1 - 1e-12:
        t0, tn = k * dt, min((k + 1) * dt, t1)
        L_next = np.array([L_of_t(tn)])
        _, t, p = crossing_events(L_prev, L_next, L_ref, C, t0, tn)
        times += t.tolist()
        pols += p.tolist()
        L_prev = L_next
        k += 1
    return np.array(times), np.array(pols)


def test_render_levels_and_edges():
    cam = gt_camera("pinhole_none")
    pose = fronto(BOARD)
    L = render_log_intensity(BOARD, cam, pose)
    assert L.shape == (500, 500)
    assert np.isclose(L.min(), np.log(I_DARK)) and np.isclose(L.max(), np.log(I_LIGHT))
    assert np.isclose(L[5, 5], np.log(0.5))
    I = get_renderer(cam).render_intensity(BOARD, pose)
    s = BOARD.square_size
    f = 200.0 / 0.5
    # every vertical checker edge, scanned along the middle of each square row
    for i in range(-1, BOARD.rows):
        v = int(round(f * ((i + 0.5) * s - BOARD.center[1]) + 250))
        for j in range(BOARD.cols):
            u_edge = f * (j * s - BOARD.center[0]) + 250
            a, b = int(np.floor(u_edge)) - 4, int(np.floor(u_edge)) + 5
            row = I[v, a : b + 1]
            left = row[0]
            assert np.isclose(left, I_DARK) or np.isclose(left, I_LIGHT)
            other = I_LIGHT + I_DARK - left
            n_left = np.sum((other - row) / (other - left))
            est = a - 0.5 + n_left
            assert abs(est - u_edge) < 0.5


def test_behind_camera_is_degenerate():
    cam = gt_camera("pinhole_none")
    behind = Pose(np.array([1.0, 0, 0, 0]), -BOARD.center + [0, 0, -0.5])
    with pytest.raises(DegeneratePose):
        render_log_intensity(BOARD, cam, behind)
    through = Pose(quat_from_rotvec([np.pi / 2, 0, 0]), [0.0, 0.0, 0.0])
    with pytest.raises(DegeneratePose):
        render_log_intensity(BOARD, cam, through)


def test_roll_180_symmetry():
    # pixel centers are integers, so the geometric center of 500 pixels is 249.5
    cam = CameraModel("pinhole_none", 200, 200, 249.5, 249.5, None, (500, 500))
    pose = Pose(quat_from_rotvec([0.2, -0.1, 0.3]), -BOARD.center + [0.03, -0.02, 0.55])
    roll = Pose(quat_from_rotvec([0.0, 0.0, np.pi]), np.zeros(3))
    a = render_log_intensity(BOARD, cam, pose)
    b = render_log_intensity(BOARD, cam, roll @ pose)
    diff = np.abs(b - a[::-1, ::-1])
    assert np.mean(diff < 1e-9) > 0.999
    assert np.max(diff) < 1e-6 or np.mean(diff > 1e-6) < 1e-3


def test_static_board_no_events():
    cam = CameraModel("pinhole_none", 60, 60, 50, 50, None, (100, 100))
    pose = fronto(BOARD, depth=0.6)
    traj = Trajectory((0, 200_000), (pose, pose))
    res = generate_events(SimConfig(cam), BOARD, traj)
    assert len(res.stream) == 0
    assert len(res.frames) == 5


def test_ramp_crossing_times():
    C = 0.2
    t, p = ramp_events(lambda s: s, C)
    assert len(t) == 5 and np.all(p == 1)
    assert np.allclose(t, [0.2, 0.4, 0.6, 0.8, 1.0], atol=0.005)
    t, p = ramp_events(lambda s: -s, C)
    assert len(t) == 5 and np.all(p == -1)
    assert np.allclose(t, [0.2, 0.4, 0.6, 0.8, 1.0], atol=0.005)


def test_halving_threshold_doubles_events():
    rng = np.random.default_rng(0)
    slopes = rng.uniform(-3, 3, 500)
    for C in (0.3, 0.17):
        L0 = np.zeros(500)
        n_full = len(crossing_events(L0, slopes, L0.copy(), C, 0.0, 1.0)[0])
        n_half = len(crossing_events(L0, slopes, L0.copy(), C / 2, 0.0, 1.0)[0])
        assert n_half >= 2 * n_full


def test_sample_pose():
    a = Pose(np.array([1.0, 0, 0, 0]), [0.0, 0.0, 1.0])
    b = Pose(quat_from_rotvec([0, 0, np.pi / 2]), [0.0, 0.0, 3.0])
    traj = Trajectory((0, 1000), (a, b))
    assert sample_pose(traj, 0) is a and sample_pose(traj, 1000) is b
    mid = sample_pose(traj, 500)
    assert np.allclose(mid.translation, [0, 0, 2])
    assert np.allclose(mid.rotation, quat_from_rotvec([0, 0, np.pi / 4]), atol=1e-12)
    with pytest.raises(OutOfRange):
        sample_pose(traj, 1001)
    with pytest.raises(ValidationError):
        Trajectory((0, 0), (a, b))


def test_determinism_with_noise():
    cam = CameraModel("pinhole_radtan", 60, 60, 50, 50, [-0.3, 0.1, 0, 0], (100, 100))
    traj = calibration_trajectory(cam, BOARD, 3, seed=4, depth_range=(0.6, 0.8), min_square_px=3.0)
    cfg = SimConfig(cam, threshold_sigma=0.03, background_rate=0.5, seed=11)
    a = generate_events(cfg, BOARD, traj)
    b = generate_events(cfg, BOARD, traj)
    assert len(a.stream) > 0
    assert a.stream.events.tobytes() == b.stream.events.tobytes()
    assert np.all(np.diff(a.stream.t.astype(np.int64)) >= 0)


def test_degenerate_pose_carries_timestamp():
    cam = CameraModel("pinhole_none", 60, 60, 50, 50, None, (100, 100))
    good = fronto(BOARD, 0.6)
    bad = Pose(good.rotation, -BOARD.center + [0, 0, -0.6])
    traj = Trajectory((0, 10_000, 20_000), (good, good, bad))
    with pytest.raises(DegeneratePose) as exc:
        generate_events(SimConfig(cam), BOARD, traj)
    assert exc.value.timestamp is not None and exc.value.timestamp > 0


def test_sim_config_validation():
    cam = gt_camera("pinhole_none")
    with pytest.raises(ValidationError):
        SimConfig(cam, contrast_threshold=0)
    with pytest.raises(ValidationError):
        SimConfig(cam, render_rate=100, frame_rate=20)


def test_views_visible_and_stereo_rig():
    cam = gt_camera("pinhole_radtan")
    T = stereo_extrinsic(0.51, 1.1)
    assert np.isclose(np.linalg.norm(T.translation), 0.51)
    # the optical axes of the two cameras meet at the convergence depth
    assert np.isclose(T.apply(np.array([[0, 0, 1.1]]))[0, 0], 0.0, atol=1e-12)
    board = BoardSpec(square_size=0.08)
    traj = calibration_trajectory(cam, board, 5, seed=2, extra_cameras=[(cam, T)], depth_range=(0.8, 1.4))
    for p in traj.poses[1:]:
        for pose in (p, T @ p):
            assert board_fully_visible(cam, pose, board)
            assert min_square_size_px(cam, pose, board) >= 8.0
    # the lead-in view shows no board at all
    assert np.all(get_renderer(cam).render_intensity(board, traj.poses[0]) == 0.5)
