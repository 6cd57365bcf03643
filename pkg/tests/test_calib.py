import numpy as np
import pytest

from _support import GT_DIST, SENSOR, analytic_detections, chi2_rms, gt_camera, pose_error, stereo_trajectory
from evcalib.calib import (
    CalibrationResult,
    SolverOptions,
    calibrate_camera,
    calibrate_stereo,
    init_intrinsics,
    init_pose,
    match_views,
    read_result,
    refine_full,
    relative_pose_median,
    rms_reprojection,
    write_result,
)
from evcalib.camera import MODELS
from evcalib.detect import Detection
from evcalib.errors import (
    DegenerateConfiguration,
    IllConditioned,
    MissingPose,
    NoCovisibility,
    NotConverged,
    RankDeficient,
    ValidationError,
)
from evcalib.geometry import Pose, quat_from_rotvec
from evcalib.homography import apply_homography, estimate_homography
from evcalib.simulator import BoardSpec, random_view

BOARD = BoardSpec()


def views(cam, n, seed, board=BOARD):
    rng = np.random.default_rng(seed)
    return [random_view(cam, board, rng) for _ in range(n)]


def homographies(dets):
    return [estimate_homography(d.image_points, d.object_points) for d in dets]


# --- homography ----------------------------------------------------------------


def test_homography_exact():
    cam = gt_camera("pinhole_none")
    (pose,) = views(cam, 1, 0)
    (det,) = analytic_detections(cam, BOARD, [pose], [0])
    H, res = estimate_homography(det.image_points, det.object_points, return_residual=True)
    assert np.isclose(np.linalg.norm(H), 1.0)
    assert np.max(np.abs(apply_homography(H, det.object_points[:, :2]) - det.image_points)) < 1e-8
    assert (H @ [*BOARD.center[:2], 1.0])[2] > 0
    assert res < 1e-8


def test_homography_identity_and_collinear():
    pts = np.random.default_rng(1).uniform(-1, 1, (20, 2))
    H = estimate_homography(pts, pts)
    assert np.allclose(H / H[2, 2], np.eye(3), atol=1e-10)
    line = np.column_stack([np.arange(4.0), 2 * np.arange(4.0)])
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(line, np.random.default_rng(2).uniform(0, 1, (4, 2)))
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(pts[:4], line)


# --- initialization ----------------------------------------------------------------


def test_zhang_exact_recovery():
    cam = gt_camera("pinhole_none")
    dets = analytic_detections(cam, BOARD, views(cam, 10, 3), range(10))
    pts = np.concatenate([d.image_points for d in dets])
    k = init_intrinsics(homographies(dets), "pinhole_none", SENSOR, image_points=pts)
    assert np.allclose([k.fx, k.fy, k.cx, k.cy], [200, 200, 250, 250], rtol=1e-6)
    k2 = init_intrinsics(homographies(dets), "pinhole_none", SENSOR)
    assert np.allclose(k2.params, cam.params, rtol=1e-6)


def test_zhang_parallel_planes_ill_conditioned():
    # rotations about the board normal keep every view's plane parallel
    cam = gt_camera("pinhole_none")
    base = Pose(quat_from_rotvec([0.3, 0.2, 0.0]), [0.0, 0.0, 0.0])
    poses = []
    for a, dt in [(0.0, [0, 0, 0.6]), (0.4, [0.03, 0, 0.65]), (-0.5, [-0.02, 0.02, 0.55])]:
        spin = Pose(quat_from_rotvec([0, 0, a]), [0.0, 0.0, 0.0])
        p = base @ spin
        poses.append(Pose(p.rotation, p.R @ -BOARD.center + dt))
    dets = analytic_detections(cam, BOARD, poses, range(3))
    with pytest.raises(IllConditioned):
        init_intrinsics(homographies(dets), "pinhole_none", SENSOR)


def test_zhang_symmetric_views_center():
    cam = gt_camera("pinhole_none")
    poses = []
    for ax in ([0.4, 0, 0], [-0.4, 0, 0], [0, 0.4, 0], [0, -0.4, 0]):
        R = Pose(quat_from_rotvec(ax), [0, 0, 0])
        poses.append(Pose(R.rotation, -(R.R @ BOARD.center) + [0, 0, 0.6]))
    dets = analytic_detections(cam, BOARD, poses, range(4))
    k = init_intrinsics(homographies(dets), "pinhole_none", SENSOR)
    assert abs(k.cx - 250) < 1e-6 and abs(k.cy - 250) < 1e-6


def test_zhang_needs_three():
    with pytest.raises(ValidationError):
        init_intrinsics([np.eye(3)] * 2)


@pytest.mark.parametrize("model", MODELS)
def test_init_pose_exact(model):
    cam = gt_camera(model)
    for pose in views(cam, 5, 4):
        (det,) = analytic_detections(cam, BOARD, [pose], [0])
        est = init_pose(cam, det.image_points, det.object_points)
        ang, dt = pose_error(est, pose)
        assert ang < 1e-6 and dt / np.linalg.norm(pose.translation) < 1e-6


def test_init_pose_fronto_and_mirrored():
    cam = gt_camera("pinhole_none")
    pose = Pose(np.array([1.0, 0, 0, 0]), -BOARD.center + [0, 0, 0.7])
    (det,) = analytic_detections(cam, BOARD, [pose], [0])
    est = init_pose(cam, det.image_points, det.object_points)
    assert np.isclose(est.translation[2], 0.7) and pose_error(est, pose)[0] < 1e-9
    # reflect the board coordinates: the homography flips sign, depth must stay positive
    obj = det.object_points * [1, -1, 1]
    est = init_pose(cam, det.image_points, obj)
    assert (est.apply(obj)[:, 2] > 0).all()


# --- refinement -----------------------------------------------------------------


@pytest.mark.parametrize("model", MODELS)
def test_exact_data_recovery(model):
    cam = gt_camera(model)
    dets = analytic_detections(cam, BOARD, views(cam, 20, 5), range(20))
    res = calibrate_camera(dets, model, SENSOR)
    assert res.converged
    rel = np.abs(res.camera.params[:4] - cam.params[:4]) / cam.params[:4]
    assert rel.max() < 1e-3
    if model != "pinhole_none":
        assert np.max(np.abs(res.camera.dist - cam.dist)) < 1e-3
    assert res.rms_reprojection_px < 1e-3
    assert np.all(np.diff(res.cost_history) <= 0)
    assert np.isclose(rms_reprojection(res), res.rms_reprojection_px)


def test_fixed_point():
    cam = gt_camera("pinhole_radtan")
    poses = views(cam, 10, 6)
    dets = analytic_detections(cam, BOARD, poses, range(10))
    init = CalibrationResult([cam], poses, list(range(10)), [Pose.identity()], [{t: t for t in range(10)}])
    res = refine_full([dets], BOARD, init)
    assert res.iterations <= 2 and res.converged
    assert np.max(np.abs(res.camera.params - cam.params)) < 1e-12
    for a, b in zip(res.poses, poses):
        assert np.max(np.abs(a.as_matrix() - b.as_matrix())) < 1e-12


def test_noise_rms_matches_chi2():
    cam = gt_camera("pinhole_radtan")
    poses = views(cam, 15, 7)
    ratios = []
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        dets = analytic_detections(cam, BOARD, poses, range(15), sigma=0.1, rng=rng)
        res = calibrate_camera(dets, cam.model, SENSOR)
        m = 2 * 54 * 15
        P = cam.n_params + 6 * 15
        ratios.append(res.rms_reprojection_px / chi2_rms(m, P, 0.1))
        assert np.all(np.diff(res.cost_history) <= 0)
    assert abs(np.mean(ratios) - 1.0) < 0.2
    assert np.all(np.abs(np.array(ratios) - 1.0) < 0.2)


def test_huber_resists_outliers():
    cam = gt_camera("pinhole_none")
    poses = views(cam, 12, 8)
    rng = np.random.default_rng(9)
    dets = analytic_detections(cam, BOARD, poses, range(12), sigma=0.1, rng=rng)
    bad = dets[3].corners.copy()
    bad[2, 4] += [25.0, -30.0]
    bad[0, 0] += [-20.0, 15.0]
    dets[3] = Detection(3, bad, dets[3].board_points)
    sq = calibrate_camera(dets, cam.model, SENSOR)
    hub = calibrate_camera(dets, cam.model, SENSOR, SolverOptions(loss="huber"))
    err = lambda r: np.max(np.abs(r.camera.params - cam.params))
    assert err(hub) < err(sq)
    assert np.all(np.diff(hub.cost_history) <= 0)


def test_not_converged_and_rank_deficient():
    cam = gt_camera("pinhole_radtan")
    poses = views(cam, 6, 10)
    dets = analytic_detections(cam, BOARD, poses, range(6))
    start = cam.with_params(cam.params * [1.05, 0.95, 1.02, 0.98, 0, 0, 0, 0])
    init = CalibrationResult([start], poses, list(range(6)), [Pose.identity()], [{t: t for t in range(6)}])
    res = refine_full([dets], BOARD, init, SolverOptions(max_iterations=1))
    assert not res.converged
    with pytest.raises(NotConverged) as exc:
        refine_full([dets], BOARD, init, SolverOptions(max_iterations=1, strict=True))
    assert exc.value.result is not None
    many = CalibrationResult([cam], poses * 10, list(range(60)), [Pose.identity()], [{0: 0}])
    with pytest.raises(RankDeficient):
        refine_full([dets[:1]], BOARD, many)


def test_rms_convention_and_missing_pose():
    cam = gt_camera("pinhole_none")
    poses = views(cam, 3, 11)
    dets = analytic_detections(cam, BOARD, poses, range(3))
    res = CalibrationResult([cam], poses, [0, 1, 2], [Pose.identity()], [{0: 0, 1: 1, 2: 2}])
    assert rms_reprojection(res, dets) == pytest.approx(0.0, abs=1e-12)
    off = dets[1].corners.copy()
    off[1, 1] += [3.0, 4.0]
    dets2 = [dets[0], Detection(1, off, dets[1].board_points), dets[2]]
    N = 3 * 54
    assert rms_reprojection(res, dets2) == pytest.approx(np.sqrt(25 / (2 * N)), rel=1e-9)
    with pytest.raises(MissingPose):
        rms_reprojection(res, dets + [Detection(99, off, dets[1].board_points)])


def test_calibrate_camera_validation():
    cam = gt_camera("pinhole_none")
    dets = analytic_detections(cam, BOARD, views(cam, 3, 12), [5, 5, 6])
    with pytest.raises(ValidationError):
        calibrate_camera(dets[:2])
    with pytest.raises(ValidationError):
        calibrate_camera(dets)


def test_gauge_invariance():
    """An in-plane rigid relabeling of the board frame changes only the poses."""
    cam = gt_camera("pinhole_radtan")
    poses = views(cam, 12, 13)
    rng = np.random.default_rng(14)
    dets = analytic_detections(cam, BOARD, poses, range(12), sigma=0.1, rng=rng)
    G = Pose(quat_from_rotvec([0, 0, 0.7]), [0.3, -0.1, 0.0])
    moved = [Detection(d.frame_timestamp, d.corners, G.apply(d.object_points).reshape(6, 9, 3)) for d in dets]
    a = calibrate_camera(dets, cam.model, SENSOR)
    b = calibrate_camera(moved, cam.model, SENSOR)
    assert np.allclose(a.camera.params, b.camera.params, rtol=1e-7, atol=1e-9)
    assert a.rms_reprojection_px == pytest.approx(b.rms_reprojection_px, rel=1e-8)
    Gi = G.inverse()
    for pa, pb in zip(a.poses, b.poses):
        assert np.allclose((pb @ G).as_matrix(), pa.as_matrix(), atol=1e-7)
        assert np.allclose(pb.as_matrix(), (pa @ Gi).as_matrix(), atol=1e-7)


# --- stereo ------------------------------------------------------------------------


def test_match_views():
    cam = gt_camera("pinhole_none")
    poses = views(cam, 4, 15)
    a = analytic_detections(cam, BOARD, poses, [0, 50_000, 100_000, 150_000])
    b = analytic_detections(cam, BOARD, poses[:3], [24_000, 76_000, 180_000])
    assert match_views(a, b, 50_000) == [(0, 0), (2, 1)]
    assert match_views(a, b[:0], 50_000) == []


def test_stereo_identity():
    cam = gt_camera("pinhole_none")
    dets = analytic_detections(cam, BOARD, views(cam, 10, 16), range(10))
    ra = calibrate_camera(dets, cam.model, SENSOR)
    st = calibrate_stereo(ra, ra, [(i, i) for i in range(10)])
    T = st.extrinsics[1]
    assert np.linalg.norm(T.translation) < 1e-9
    assert np.linalg.norm(T.rotation - [1, 0, 0, 0]) < 1e-9
    with pytest.raises(NoCovisibility):
        calibrate_stereo(ra, ra, [])


def test_relative_pose_median_exact():
    rng = np.random.default_rng(17)
    T = Pose.from_rotvec([0.05, -0.4, 0.02], [-0.5, 0.01, 0.1])
    pa = [Pose.from_rotvec(rng.normal(0, 0.3, 3), rng.normal(0, 0.2, 3) + [0, 0, 1]) for _ in range(7)]
    est = relative_pose_median(pa, [T @ p for p in pa])
    assert np.allclose(est.as_matrix(), T.as_matrix(), atol=1e-12)


@pytest.mark.parametrize("sigma,bound_mm", [(0.0, 1.0), (0.1, 5.0)])
def test_stereo_baseline(sigma, bound_mm):
    cam = gt_camera("pinhole_radtan")
    T, traj = stereo_trajectory(cam, 30, seed=3)
    board = BoardSpec(square_size=0.08)
    rng = np.random.default_rng(18)
    da = analytic_detections(cam, board, traj.poses[1:], traj.times[1:], sigma, rng)
    db = analytic_detections(cam, board, traj.poses[1:], traj.times[1:], sigma, rng, T=T)
    ra = calibrate_camera(da, cam.model, SENSOR)
    rb = calibrate_camera(db, cam.model, SENSOR)
    st = calibrate_stereo(ra, rb, match_views(da, db, 50_000))
    assert st.converged and st.n_cameras == 2
    assert abs(st.baseline - 0.51) * 1000 < bound_mm
    assert np.linalg.norm(st.extrinsics[1].translation - T.translation) * 1000 < bound_mm
    assert np.all(np.diff(st.cost_history) <= 0)


def test_stereo_unmatched_views_become_extra_poses():
    cam = gt_camera("pinhole_none")
    T, traj = stereo_trajectory(cam, 8, seed=4)
    board = BoardSpec(square_size=0.08)
    da = analytic_detections(cam, board, traj.poses[1:6], traj.times[1:6])
    db = analytic_detections(cam, board, traj.poses[3:], traj.times[3:], T=T)
    ra = calibrate_camera(da, cam.model, SENSOR)
    rb = calibrate_camera(db, cam.model, SENSOR)
    st = calibrate_stereo(ra, rb, match_views(da, db, 50_000))
    assert len(st.poses) == 8
    assert np.linalg.norm(st.extrinsics[1].translation - T.translation) < 1e-6


# --- serialization -------------------------------------------------------------------


def test_yaml_round_trip(tmp_path):
    cam = gt_camera("pinhole_equi")
    T, traj = stereo_trajectory(cam, 6, seed=5)
    board = BoardSpec(square_size=0.08)
    rng = np.random.default_rng(19)
    da = analytic_detections(cam, board, traj.poses[1:], traj.times[1:], 0.1, rng)
    db = analytic_detections(cam, board, traj.poses[1:], traj.times[1:], 0.1, rng, T=T)
    st = calibrate_stereo(
        calibrate_camera(da, cam.model, SENSOR), calibrate_camera(db, cam.model, SENSOR), match_views(da, db, 50_000)
    )
    path = tmp_path / "calibration.yaml"
    write_result(st, path)
    back = read_result(path)
    assert back.n_cameras == 2
    for a, b in zip(st.cameras, back.cameras):
        assert a.model == b.model and np.array_equal(a.params, b.params)
    assert np.array_equal(back.extrinsics[1].translation, st.extrinsics[1].translation)
    assert back.rms_reprojection_px == st.rms_reprojection_px
    assert [p.translation.tolist() for p in back.poses] == [p.translation.tolist() for p in st.poses]
    assert rms_reprojection(back, [da, db]) == pytest.approx(st.rms_reprojection_px, rel=1e-12)
    assert len(back.per_view) == len(st.per_view)
    text = path.read_text()
    assert "pinhole_equi" in text and "quaternion_wxyz" in text


def test_distortion_models_listed():
    assert set(GT_DIST) == set(MODELS)
