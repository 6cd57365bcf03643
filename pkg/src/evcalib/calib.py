"""Target-based intrinsic and extrinsic calibration.

Initialization is closed-form (zero-skew image of the absolute conic from
plane homographies, then per-view pose from the homography), followed by
a joint Levenberg-Marquardt refinement of all intrinsics, distortion
coefficients, board poses and inter-camera transforms.

Board poses are expressed in the frame of camera 0, which is pinned to
the identity.  Camera ``k`` sees a board point ``X`` of view ``v`` at
``T_k(T_v(X))`` where ``T_k`` maps camera-0 coordinates into camera ``k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import yaml
from scipy import sparse

from .camera import CameraModel
from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    IllConditioned,
    MissingPose,
    NoCovisibility,
    NotConverged,
    RankDeficient,
    ValidationError,
)
from .geometry import Pose, chordal_mean, project_to_so3
from .homography import estimate_homography

log = logging.getLogger(__name__)

ZHANG_MAX_COND = 1e8


# --- results -----------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    lambda0: float = 1e-4
    rel_cost_tol: float = 1e-10
    grad_tol: float = 1e-8
    loss: str = "squared"  # or "huber"
    huber_delta: float = 1.0
    strict: bool = False  # raise NotConverged instead of flagging

    def __post_init__(self):
        if self.loss not in ("squared", "huber"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.max_iterations < 0 or self.huber_delta <= 0:
            raise ValidationError("invalid solver options")


@dataclass(frozen=True)
class ViewResidual:
    camera: int
    view: int
    timestamp: int
    n_corners: int
    rms_px: float
    max_px: float


@dataclass
class CalibrationResult:
    cameras: list[CameraModel]
    poses: list[Pose]  # board -> camera 0, one per view
    view_timestamps: list[int]
    extrinsics: list[Pose]  # camera 0 -> camera k; extrinsics[0] is the identity
    observations: list[dict[int, int]]  # per camera: detection timestamp -> view index
    rms_reprojection_px: float = float("nan")
    per_view: list[ViewResidual] = field(default_factory=list)
    covariance_diag: list[np.ndarray] = field(default_factory=list)
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    detections: list[list] | None = field(default=None, repr=False)

    @property
    def camera(self) -> CameraModel:
        return self.cameras[0]

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def baseline(self) -> float:
        if len(self.extrinsics) < 2:
            raise ValidationError("single-camera result has no baseline")
        return float(np.linalg.norm(self.extrinsics[1].translation))

    def camera_pose(self, cam: int, view: int) -> Pose:
        """Board -> camera ``cam`` transform for ``view``."""
        return self.extrinsics[cam].compose(self.poses[view])


# --- initialization ------------------------------------------------------------


def _conic_row(H, i, j):
    """Coefficients of ``h_i^T B h_j`` in (B11, B22, B13, B23, B33) with B12 = 0."""
    a, b = H[:, i], H[:, j]
    return np.array(
        [
            a[0] * b[0],
            a[1] * b[1],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    )


def init_intrinsics(
    homographies: Sequence[np.ndarray],
    model: str = "pinhole_none",
    sensor_size=(500, 500),
    image_points=None,
) -> CameraModel:
    """Zero-skew closed-form intrinsics from >= 3 board homographies.

    The linear system is solved in Hartley-normalized pixel coordinates.
    ``image_points`` (any (N, 2) array) sets the normalization; without it
    the sensor center/size is used.
    """
    Hs = [np.asarray(H, dtype=float) for H in homographies]
    if len(Hs) < 3:
        raise ValidationError("need at least 3 homographies")
    if image_points is not None:
        pts = np.asarray(image_points, dtype=float).reshape(-1, 2)
        m = pts.mean(axis=0)
        d = np.sqrt(np.sum((pts - m) ** 2, axis=1)).mean()
    else:
        m = np.array(sensor_size, dtype=float) / 2.0
        d = float(np.linalg.norm(m))
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * m[0]], [0.0, s, -s * m[1]], [0.0, 0.0, 1.0]])
    rows = []
    for H in Hs:
        Hn = T @ H
        Hn /= np.linalg.norm(Hn)
        rows.append(_conic_row(Hn, 0, 1))
        rows.append(_conic_row(Hn, 0, 0) - _conic_row(Hn, 1, 1))
    V = np.array(rows)
    _, sv, Vt = np.linalg.svd(V)
    cond = sv[0] / sv[-2] if sv[-2] > 0 else np.inf
    if not np.isfinite(cond) or cond > ZHANG_MAX_COND:
        raise IllConditioned(f"absolute-conic system condition number {cond:.3g} > {ZHANG_MAX_COND:g}")
    B11, B22, B13, B23, B33 = Vt[-1]
    if B11 * B22 <= 0:
        raise IllConditioned("conic estimate is not positive definite")
    cx_n = -B13 / B11
    cy_n = -B23 / B22
    lam = B33 - B13 * B13 / B11 - B23 * B23 / B22
    fx2, fy2 = lam / B11, lam / B22
    if fx2 <= 0 or fy2 <= 0:
        raise IllConditioned("conic estimate is not positive definite")
    fx_n, fy_n = np.sqrt(fx2), np.sqrt(fy2)
    fx, fy = fx_n / s, fy_n / s
    cx, cy = cx_n / s + m[0], cy_n / s + m[1]
    return CameraModel(model, fx, fy, cx, cy, np.zeros(4), tuple(sensor_size))


def init_pose(model: CameraModel, corners2d, board_points) -> Pose:
    """Board pose from the homography between the board and normalized image points."""
    uv = np.asarray(corners2d, dtype=float).reshape(-1, 2)
    obj = np.asarray(board_points, dtype=float).reshape(len(uv), -1)
    rays, ok = model.unproject_pixels(uv)
    if np.count_nonzero(ok) < 4:
        raise DegenerateConfiguration("fewer than 4 corners inside the invertible distortion range")
    xy = rays[ok, :2] / rays[ok, 2:3]
    H = estimate_homography(xy, obj[ok, :2])
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    centroid = np.array([*obj[ok, :2].mean(axis=0), 0.0])
    for sign in (1.0, -1.0):
        r1, r2 = sign * lam * h1, sign * lam * h2
        R = project_to_so3(np.column_stack([r1, r2, np.cross(r1, r2)]))
        t = sign * lam * h3
        if (R @ centroid + t)[2] > 0:
            return Pose.from_matrix(R, t)
    raise DegenerateConfiguration("no positive-depth pose for this homography")


# --- residuals and Jacobians ---------------------------------------------------


@dataclass
class _CamBlock:
    cam: int
    uv: np.ndarray  # (M, 2) observed
    obj: np.ndarray  # (M, 3)
    view: np.ndarray  # (M,) view index per point
    det_slices: list  # (view, timestamp, slice)


class _Problem:
    """Parameter layout: [intrinsics of each camera | extrinsics 1..K-1 | views]."""

    def __init__(self, cameras, extrinsics, poses, blocks):
        self.cameras = list(cameras)
        self.extrinsics = list(extrinsics)
        self.poses = list(poses)
        self.blocks = blocks
        self.intr_off = np.cumsum([0] + [c.n_params for c in self.cameras])
        self.ext_off = self.intr_off[-1]
        self.view_off = self.ext_off + 6 * (len(self.cameras) - 1)
        self.n_params = self.view_off + 6 * len(self.poses)
        self.n_residuals = sum(2 * len(b.uv) for b in blocks)

    def state(self):
        return self.cameras, self.extrinsics, self.poses

    def residuals(self, state=None, jacobian=False):
        cams, exts, poses = state if state is not None else self.state()
        R_v = np.array([p.R for p in poses])
        t_v = np.array([p.translation for p in poses])
        res = []
        rows, cols, vals = [], [], []
        row0 = 0
        for b in self.blocks:
            k = b.cam
            cam = cams[k]
            Rv, tv = R_v[b.view], t_v[b.view]
            RX = np.einsum("mij,mj->mi", Rv, b.obj)
            Y = RX + tv
            if k > 0:
                Re, te = exts[k].R, exts[k].translation
                Xc = Y @ Re.T + te
            else:
                Xc = Y
            if not jacobian:
                res.append((cam.project_points(Xc) - b.uv).ravel())
                continue
            uv, J_X, J_p = cam.project_points(Xc, jacobians=True)
            res.append((uv - b.uv).ravel())
            M = len(uv)
            blocks_vals = [J_p]
            blocks_cols = [np.broadcast_to(self.intr_off[k] + np.arange(cam.n_params), (M, cam.n_params))]
            if k > 0:
                J_Y = J_X @ Re
                # left increments: d(exp(w) R Y)/dw = -[R Y]x
                J_ew = -np.einsum("mij,mjk->mik", J_X, _skew_batch(Y @ Re.T))
                blocks_vals += [J_ew, J_X]
                c = self.ext_off + 6 * (k - 1) + np.arange(6)
                blocks_cols.append(np.broadcast_to(c, (M, 6)))
            else:
                J_Y = J_X
            J_vw = -np.einsum("mij,mjk->mik", J_Y, _skew_batch(RX))
            blocks_vals += [J_vw, J_Y]
            vc = self.view_off + 6 * b.view[:, None] + np.arange(6)[None]
            blocks_cols.append(vc)
            V = np.concatenate(blocks_vals, axis=2)  # (M, 2, nc)
            C = np.concatenate(blocks_cols, axis=1)  # (M, nc)
            nc = C.shape[1]
            r_idx = row0 + np.arange(2 * M).reshape(M, 2)
            rows.append(np.broadcast_to(r_idx[:, :, None], (M, 2, nc)).ravel())
            cols.append(np.broadcast_to(C[:, None, :], (M, 2, nc)).ravel())
            vals.append(V.ravel())
            row0 += 2 * M
        r = np.concatenate(res) if res else np.zeros(0)
        if not jacobian:
            return r
        J = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_residuals, self.n_params),
        )
        return r, J

    def apply_step(self, delta):
        cams = [c.with_params(c.params + delta[self.intr_off[i] : self.intr_off[i + 1]]) for i, c in enumerate(self.cameras)]
        exts = [self.extrinsics[0]] + [
            e.retract(delta[self.ext_off + 6 * (k - 1) : self.ext_off + 6 * k]) for k, e in enumerate(self.extrinsics) if k > 0
        ]
        poses = [p.retract(delta[self.view_off + 6 * v : self.view_off + 6 * v + 6]) for v, p in enumerate(self.poses)]
        return cams, exts, poses

    def set_state(self, state):
        self.cameras, self.extrinsics, self.poses = (list(s) for s in state)


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _point_weights(r, options: SolverOptions):
    """IRLS weight per residual component (shared by both components of a corner)."""
    if options.loss == "squared":
        return np.ones_like(r)
    norm = np.sqrt(r[0::2] ** 2 + r[1::2] ** 2)
    w = np.where(norm <= options.huber_delta, 1.0, options.huber_delta / np.maximum(norm, 1e-300))
    return np.repeat(w, 2)


def _cost(r, options: SolverOptions) -> float:
    if options.loss == "squared":
        return 0.5 * float(r @ r)
    d = options.huber_delta
    norm = np.sqrt(r[0::2] ** 2 + r[1::2] ** 2)
    return float(np.sum(np.where(norm <= d, 0.5 * norm**2, d * (norm - 0.5 * d))))


def _blocks_from(detections, observations):
    blocks = []
    for k, dets in enumerate(detections):
        uv, obj, view, slices = [], [], [], []
        n = 0
        for det in dets:
            v = observations[k].get(int(det.frame_timestamp))
            if v is None:
                raise MissingPose(det.frame_timestamp)
            p2 = np.asarray(det.image_points, dtype=float)
            uv.append(p2)
            obj.append(np.asarray(det.object_points, dtype=float))
            view.append(np.full(len(p2), v, dtype=np.int64))
            slices.append((v, int(det.frame_timestamp), slice(n, n + len(p2))))
            n += len(p2)
        if n:
            blocks.append(_CamBlock(k, np.concatenate(uv), np.concatenate(obj), np.concatenate(view), slices))
    return blocks


# --- refinement ------------------------------------------------------------------


def refine_full(detections, board=None, init: CalibrationResult | None = None, options: SolverOptions = SolverOptions()):
    """Joint Levenberg-Marquardt refinement.

    ``detections`` is a list per camera of Detection lists (a flat list is
    taken as camera 0).  ``init`` supplies the starting cameras, poses,
    extrinsics and the detection-to-view mapping.  ``board`` is accepted
    for symmetry with the detector; the board geometry travels with each
    Detection.
    """
    if init is None:
        raise ValidationError("refine_full needs an initial CalibrationResult")
    detections = _per_camera(detections)
    if len(detections) != init.n_cameras:
        raise ValidationError(f"{len(detections)} detection lists for {init.n_cameras} cameras")
    blocks = _blocks_from(detections, init.observations)
    prob = _Problem(init.cameras, init.extrinsics, init.poses, blocks)
    for k in range(init.n_cameras):
        if not detections[k]:
            raise ValidationError(f"camera {k} has no detections")
    if prob.n_residuals < prob.n_params:
        raise RankDeficient(f"{prob.n_residuals} residuals for {prob.n_params} parameters")

    lam = options.lambda0
    r, J = prob.residuals(jacobian=True)
    cost = _cost(r, options)
    history = [cost]
    converged = False
    it = 0
    while it < options.max_iterations:
        w = _point_weights(r, options)
        Jw = J.multiply(w[:, None]).tocsr() if options.loss != "squared" else J
        A = (J.T @ Jw).toarray()
        g = Jw.T @ r
        if np.max(np.abs(g)) < options.grad_tol or cost == 0.0:
            converged = True
            break
        diag = np.maximum(np.diag(A), 1e-12)
        accepted = False
        while True:
            it += 1
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(A + lam * np.diag(diag), -g, rcond=None)[0]
            trial = prob.apply_step(delta)
            try:
                r_new = prob.residuals(trial)
                new_cost = _cost(r_new, options)
            except BehindCamera:
                new_cost = np.inf
            if new_cost < cost:
                accepted = True
                break
            lam *= 10.0
            if lam > 1e16 or it >= options.max_iterations:
                break
        if not accepted:
            # no descent left at any damping: the gradient is numerically zero
            converged = lam > 1e16
            break
        lam = max(lam / 10.0, 1e-15)
        prob.set_state(trial)
        rel = (cost - new_cost) / cost if cost > 0 else 0.0
        cost = new_cost
        history.append(cost)
        r, J = prob.residuals(jacobian=True)
        if rel < options.rel_cost_tol:
            converged = True
            break

    result = _finish(prob, init, detections, history, it, converged)
    if not converged:
        log.warning("Levenberg-Marquardt stopped after %d iterations without converging", it)
        if options.strict:
            raise NotConverged(result)
    return result


def _finish(prob: _Problem, init, detections, history, iterations, converged) -> CalibrationResult:
    r, J = prob.residuals(jacobian=True)
    m, P = prob.n_residuals, prob.n_params
    sigma2 = float(r @ r) / (m - P) if m > P else float("nan")
    A = (J.T @ J).toarray()
    try:
        cov = np.linalg.pinv(A, rcond=1e-15, hermitian=True) * sigma2
        cdiag = np.diag(cov)
    except np.linalg.LinAlgError:
        cdiag = np.full(P, np.nan)
    cov_diag = [cdiag[prob.intr_off[i] : prob.intr_off[i + 1]].copy() for i in range(len(prob.cameras))]
    per_view = []
    off = 0
    for b in prob.blocks:
        rb = r[off : off + 2 * len(b.uv)].reshape(-1, 2)
        off += 2 * len(b.uv)
        for v, ts, sl in b.det_slices:
            e = rb[sl]
            per_view.append(
                ViewResidual(
                    b.cam, v, ts, len(e), float(np.sqrt(np.mean(e**2))), float(np.max(np.linalg.norm(e, axis=1)))
                )
            )
    return CalibrationResult(
        cameras=list(prob.cameras),
        poses=list(prob.poses),
        view_timestamps=list(init.view_timestamps),
        extrinsics=list(prob.extrinsics),
        observations=[dict(o) for o in init.observations],
        rms_reprojection_px=_rms(r),
        per_view=per_view,
        covariance_diag=cov_diag,
        cost_history=list(history),
        iterations=int(iterations),
        converged=bool(converged),
        detections=detections,
    )


def _rms(r) -> float:
    """Per-component convention: sqrt(sum r^2 / (2 N_corners))."""
    r = np.asarray(r, dtype=float).ravel()
    return float(np.sqrt(np.mean(r**2))) if r.size else 0.0


def _per_camera(detections):
    detections = list(detections)
    if detections and not isinstance(detections[0], (list, tuple)):
        return [detections]
    return [list(d) for d in detections]


def rms_reprojection(result: CalibrationResult, detections=None) -> float:
    """Recompute the per-component RMS from the stored model, poses and detections."""
    detections = _per_camera(result.detections if detections is None else detections)
    res = []
    for k, dets in enumerate(detections):
        for det in dets:
            v = result.observations[k].get(int(det.frame_timestamp)) if k < len(result.observations) else None
            if v is None or v >= len(result.poses):
                raise MissingPose(det.frame_timestamp)
            uv = result.cameras[k].project(result.camera_pose(k, v), det.object_points)
            res.append((uv - det.image_points).ravel())
    return _rms(np.concatenate(res)) if res else 0.0


# --- drivers -------------------------------------------------------------------


def calibrate_camera(
    detections,
    model: str = "pinhole_none",
    sensor_size=(500, 500),
    options: SolverOptions = SolverOptions(),
    init_model: CameraModel | None = None,
) -> CalibrationResult:
    """Single-camera calibration: closed-form init then refinement."""
    detections = list(detections)
    if len(detections) < 3:
        raise ValidationError(f"need at least 3 detections, got {len(detections)}")
    stamps = [int(d.frame_timestamp) for d in detections]
    if len(set(stamps)) != len(stamps):
        raise ValidationError("detections must have distinct timestamps")
    if init_model is None:
        Hs = [estimate_homography(d.image_points, d.object_points) for d in detections]
        pts = np.concatenate([d.image_points for d in detections])
        k0 = init_intrinsics(Hs, model, sensor_size, image_points=pts)
    else:
        k0 = init_model
    poses = [init_pose(k0, d.image_points, d.object_points) for d in detections]
    init = CalibrationResult(
        cameras=[k0],
        poses=poses,
        view_timestamps=stamps,
        extrinsics=[Pose.identity()],
        observations=[{t: i for i, t in enumerate(stamps)}],
    )
    return refine_full([detections], None, init, options)


def match_views(dets_a, dets_b, window_us: int) -> list[tuple[int, int]]:
    """Pairs ``(i, j)`` with nearest timestamps no more than ``window_us / 2`` apart."""
    ta = np.array([int(d.frame_timestamp) for d in dets_a], dtype=np.int64)
    tb = np.array([int(d.frame_timestamp) for d in dets_b], dtype=np.int64)
    pairs = []
    if len(ta) == 0 or len(tb) == 0:
        return pairs
    order = np.argsort(tb, kind="stable")
    tbs = tb[order]
    used = set()
    for i, t in enumerate(ta):
        k = int(np.searchsorted(tbs, t))
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(tbs):
                d = abs(int(tbs[c]) - int(t))
                if 2 * d <= window_us and (best is None or d < best[0]):
                    best = (d, int(order[c]))
        if best is not None and best[1] not in used:
            used.add(best[1])
            pairs.append((i, best[1]))
    return pairs


def relative_pose_median(poses_a: Sequence[Pose], poses_b: Sequence[Pose]) -> Pose:
    """Robust ``T_ba``: chordal-mean rotation and component-median translation of ``T_b T_a^-1``."""
    rel = [pb.compose(pa.inverse()) for pa, pb in zip(poses_a, poses_b)]
    if not rel:
        raise NoCovisibility("no matched views")
    R = chordal_mean([p.R for p in rel])
    t = np.median(np.array([p.translation for p in rel]), axis=0)
    return Pose.from_matrix(R, t)


def calibrate_stereo(
    result_a: CalibrationResult,
    result_b: CalibrationResult,
    matched_views: Sequence[tuple[int, int]],
    options: SolverOptions = SolverOptions(),
) -> CalibrationResult:
    """Joint two-camera refinement seeded by the two single-camera results.

    ``matched_views`` holds ``(view_a, view_b)`` index pairs observing the
    same board pose.  Views of camera b without a partner become extra
    board poses observed through the extrinsic only.
    """
    matched_views = [(int(a), int(b)) for a, b in matched_views]
    if not matched_views:
        raise NoCovisibility("no co-visible views between the two cameras")
    if result_a.detections is None or result_b.detections is None:
        raise ValidationError("stereo calibration needs results that carry their detections")
    T_ba = relative_pose_median([result_a.poses[a] for a, _ in matched_views], [result_b.poses[b] for _, b in matched_views])
    dets_a = result_a.detections[0]
    dets_b = result_b.detections[0]
    poses = list(result_a.poses)
    stamps = list(result_a.view_timestamps)
    obs_a = dict(result_a.observations[0])
    b_to_view = {b: a for a, b in matched_views}
    inv = T_ba.inverse()
    for vb in range(len(result_b.poses)):
        if vb not in b_to_view:
            b_to_view[vb] = len(poses)
            poses.append(inv.compose(result_b.poses[vb]))
            stamps.append(result_b.view_timestamps[vb])
    obs_b = {t: b_to_view[v] for t, v in result_b.observations[0].items()}
    init = CalibrationResult(
        cameras=[result_a.camera, result_b.camera],
        poses=poses,
        view_timestamps=stamps,
        extrinsics=[Pose.identity(), T_ba],
        observations=[obs_a, obs_b],
    )
    return refine_full([dets_a, dets_b], None, init, options)


# --- serialization -------------------------------------------------------------


def _pose_dict(p: Pose) -> dict:
    return {"quaternion_wxyz": [float(v) for v in p.rotation], "translation": [float(v) for v in p.translation]}


def _pose_from(d) -> Pose:
    return Pose(np.array(d["quaternion_wxyz"], dtype=float), np.array(d["translation"], dtype=float))


def result_to_dict(result: CalibrationResult) -> dict:
    cams = []
    for k, cam in enumerate(result.cameras):
        entry = {
            "camera": k,
            "model": cam.model,
            "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
            "distortion": [float(v) for v in cam.dist],
            "sensor_size": list(cam.sensor_size),
        }
        if k < len(result.covariance_diag):
            entry["intrinsics_variance"] = [float(v) for v in result.covariance_diag[k]]
        cams.append(entry)
    return {
        "cameras": cams,
        "extrinsics": [
            {"camera": k, "T_cam_from_cam0": _pose_dict(e), "baseline_m": float(np.linalg.norm(e.translation))}
            for k, e in enumerate(result.extrinsics)
            if k > 0
        ],
        "rms_reprojection_px": float(result.rms_reprojection_px),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "cost_history": [float(c) for c in result.cost_history],
        "views": [
            {"view": v, "timestamp": int(ts), "T_cam0_from_board": _pose_dict(p)}
            for v, (ts, p) in enumerate(zip(result.view_timestamps, result.poses))
        ],
        "observations": [[[int(t), int(v)] for t, v in sorted(o.items())] for o in result.observations],
        "per_view_residuals": [
            {
                "camera": r.camera,
                "view": r.view,
                "timestamp": r.timestamp,
                "n_corners": r.n_corners,
                "rms_px": r.rms_px,
                "max_px": r.max_px,
            }
            for r in result.per_view
        ],
    }


def result_from_dict(d) -> CalibrationResult:
    cams = [
        CameraModel(c["model"], *c["intrinsics"], np.array(c["distortion"], dtype=float), tuple(c["sensor_size"]))
        for c in d["cameras"]
    ]
    exts = [Pose.identity()] + [_pose_from(e["T_cam_from_cam0"]) for e in sorted(d.get("extrinsics", []), key=lambda e: e["camera"])]
    views = sorted(d["views"], key=lambda v: v["view"])
    return CalibrationResult(
        cameras=cams,
        poses=[_pose_from(v["T_cam0_from_board"]) for v in views],
        view_timestamps=[int(v["timestamp"]) for v in views],
        extrinsics=exts,
        observations=[{int(t): int(v) for t, v in o} for o in d["observations"]],
        rms_reprojection_px=float(d["rms_reprojection_px"]),
        per_view=[ViewResidual(**r) for r in d.get("per_view_residuals", [])],
        covariance_diag=[np.array(c.get("intrinsics_variance", []), dtype=float) for c in d["cameras"]],
        cost_history=[float(c) for c in d.get("cost_history", [])],
        iterations=int(d.get("iterations", 0)),
        converged=bool(d.get("converged", True)),
    )


def write_result(result: CalibrationResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(result_to_dict(result), fh, sort_keys=False, default_flow_style=None)


def read_result(path) -> CalibrationResult:
    with open(path, encoding="utf-8") as fh:
        return result_from_dict(yaml.safe_load(fh))


def format_result(result: CalibrationResult) -> str:
    """Human-readable calibration summary."""
    lines = []
    for k, cam in enumerate(result.cameras):
        lines.append(f"camera {k}: {cam.model} {cam.sensor_size[0]}x{cam.sensor_size[1]}")
        sd = np.sqrt(result.covariance_diag[k]) if k < len(result.covariance_diag) else None
        for i, (name, val) in enumerate(zip(cam.param_names, cam.params)):
            unc = f"  +- {sd[i]:.4g}" if sd is not None and i < len(sd) and np.isfinite(sd[i]) else ""
            lines.append(f"  {name:>3} = {val:.6f}{unc}")
    for k, e in enumerate(result.extrinsics):
        if k == 0:
            continue
        q = " ".join(f"{v:.9f}" for v in e.rotation)
        t = " ".join(f"{v:.6f}" for v in e.translation)
        lines.append(f"T_cam{k}_from_cam0: q = [{q}] t = [{t}] baseline = {np.linalg.norm(e.translation):.6f} m")
    lines.append(f"views: {len(result.poses)}")
    lines.append(f"rms reprojection: {result.rms_reprojection_px:.6f} px (per component)")
    lines.append(f"iterations: {result.iterations} converged: {'yes' if result.converged else 'no'}")
    return "\n".join(lines) + "\n"


__all__ = [
    "SolverOptions",
    "ViewResidual",
    "CalibrationResult",
    "init_intrinsics",
    "init_pose",
    "refine_full",
    "rms_reprojection",
    "calibrate_camera",
    "match_views",
    "relative_pose_median",
    "calibrate_stereo",
    "result_to_dict",
    "result_from_dict",
    "write_result",
    "read_result",
    "format_result",
]
