"""Checkerboard corner detection with subpixel saddle refinement.

Pipeline: Shi-Tomasi (minimum eigenvalue) response, weighted by the
Hessian saddle strength for localization, with non-maximum suppression
and a short saddle snap per peak, a ring test keeping centrosymmetric saddle-like candidates,
grid growth from the strongest candidate with local homography
prediction, orientation canonicalization, and an iterative quadric saddle
fit per corner.  Only complete boards are returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import NotFound, ValidationError
from .homography import apply_homography, estimate_homography
from .recon import Frame
from .simulator import BoardSpec

COVERAGE_CELLS = 20
RING_SAMPLES = 32


@dataclass(frozen=True, eq=False)
class Detection:
    frame_timestamp: int
    corners: np.ndarray  # (rows, cols, 2) pixel coordinates (u, v)
    board_points: np.ndarray  # (rows, cols, 3) meters, z = 0
    quality: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float)
        b = np.asarray(self.board_points, dtype=float)
        if c.ndim != 3 or c.shape[2] != 2 or b.shape[:2] != c.shape[:2]:
            raise ValidationError("corners and board_points must be matching (rows, cols, .) grids")
        object.__setattr__(self, "corners", c)
        object.__setattr__(self, "board_points", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.corners.shape[:2]

    @property
    def image_points(self) -> np.ndarray:
        return self.corners.reshape(-1, 2)

    @property
    def object_points(self) -> np.ndarray:
        return self.board_points.reshape(-1, 3)


@dataclass(frozen=True)
class DetectorOptions:
    blur_sigma: float = 1.0
    tensor_sigma: float = 1.5
    nms_size: int = 7
    rel_threshold: float = 0.02
    ring_radius: float = 4.0
    min_contrast: float = 20.0
    min_symmetry: float = 0.5
    refine_radius: int = 4
    refine_blur: float = 1.0
    max_seeds: int = 6


# --- candidates ------------------------------------------------------------------


def _min_eigen_response(g: np.ndarray, sigma: float) -> np.ndarray:
    Iy, Ix = np.gradient(g)
    Jxx = ndimage.gaussian_filter(Ix * Ix, sigma)
    Jyy = ndimage.gaussian_filter(Iy * Iy, sigma)
    Jxy = ndimage.gaussian_filter(Ix * Iy, sigma)
    half_tr = 0.5 * (Jxx + Jyy)
    return half_tr - np.sqrt(0.25 * (Jxx - Jyy) ** 2 + Jxy**2)


def _saddle_strength(g: np.ndarray, sigma: float) -> np.ndarray:
    """``max(-det(Hessian), 0)`` of the smoothed image; positive only at saddles."""
    gg = ndimage.gaussian_filter(g, sigma)
    gxx = np.gradient(np.gradient(gg, axis=1), axis=1)
    gyy = np.gradient(np.gradient(gg, axis=0), axis=0)
    gxy = np.gradient(np.gradient(gg, axis=0), axis=1)
    return np.maximum(gxy * gxy - gxx * gyy, 0.0)


def _ring_offsets(radius: float) -> np.ndarray:
    ang = 2 * np.pi * np.arange(RING_SAMPLES) / RING_SAMPLES
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)]), ang


def find_candidates(img: np.ndarray, opts: DetectorOptions = DetectorOptions()):
    """Saddle candidates: positions (N, 2), edge directions (N, 2, 2), scores (N,)."""
    g = ndimage.gaussian_filter(img.astype(np.float64), opts.blur_sigma)
    resp = _min_eigen_response(g, opts.tensor_sigma)
    peak = resp.max()
    if peak <= 0:
        return np.empty((0, 2)), np.empty((0, 2, 2)), np.empty(0)
    # the min-eigenvalue plateau around an X-junction is flat enough that its
    # maximum drifts along the edges; weighting by the Hessian saddle strength
    # pins the peak to the junction itself
    score_map = resp * _saddle_strength(g, opts.tensor_sigma)
    local_max = ndimage.maximum_filter(score_map, size=opts.nms_size, mode="nearest")
    mask = (score_map == local_max) & (score_map > 0) & (resp > opts.rel_threshold * peak)
    border = int(np.ceil(opts.ring_radius)) + opts.refine_radius + 2
    mask[:border] = mask[-border:] = False
    mask[:, :border] = mask[:, -border:] = False
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return np.empty((0, 2)), np.empty((0, 2, 2)), np.empty(0)
    pos = np.column_stack([xs, ys]).astype(float)
    # structure-tensor peaks sit up to a few px off an X-junction: snap to the saddle
    snap = refine_subpixel(g, pos, radius=opts.refine_radius, max_iter=4, tol=0.05, max_shift=3.0, check_border=False)
    h, w = g.shape
    ok = ~snap.flagged
    ok &= (snap.corners[:, 0] >= border) & (snap.corners[:, 0] <= w - 1 - border)
    ok &= (snap.corners[:, 1] >= border) & (snap.corners[:, 1] <= h - 1 - border)
    pos = snap.corners[ok]
    ys, xs = ys[ok], xs[ok]
    if len(pos) == 0:
        return np.empty((0, 2)), np.empty((0, 2, 2)), np.empty(0)
    # peaks converging onto the same saddle: keep the strongest
    strength = resp[ys, xs]
    order = np.argsort(-strength, kind="stable")
    tree = cKDTree(pos)
    taken = np.zeros(len(pos), dtype=bool)
    keep_idx = []
    for i in order:
        if taken[i]:
            continue
        keep_idx.append(i)
        taken[tree.query_ball_point(pos[i], 1.5)] = True
    keep_idx = np.array(sorted(keep_idx))
    pos, ys, xs = pos[keep_idx], ys[keep_idx], xs[keep_idx]
    offs, ang = _ring_offsets(opts.ring_radius)
    coords = pos[:, None, :] + offs[None]
    ring = ndimage.map_coordinates(g, [coords[..., 1].ravel(), coords[..., 0].ravel()], order=1).reshape(
        len(pos), RING_SAMPLES
    )
    z = ring - ring.mean(axis=1, keepdims=True)
    contrast = ring.max(axis=1) - ring.min(axis=1)
    half = RING_SAMPLES // 2
    opp = np.roll(z, half, axis=1)
    denom = np.sqrt(np.sum(z * z, axis=1) * np.sum(opp * opp, axis=1)) + 1e-12
    sym = np.sum(z * opp, axis=1) / denom
    sgn = z >= 0
    changes = np.sum(sgn != np.roll(sgn, 1, axis=1), axis=1)
    keep = (contrast >= opts.min_contrast) & (sym >= opts.min_symmetry) & (changes == 4)
    idx = np.flatnonzero(keep)
    dirs = np.empty((idx.size, 2, 2))
    step = 2 * np.pi / RING_SAMPLES
    for n, i in enumerate(idx):
        zi = z[i]
        nxt = np.roll(zi, -1)
        cross = np.flatnonzero((zi >= 0) != (nxt >= 0))
        frac = zi[cross] / (zi[cross] - nxt[cross])
        theta = ang[cross] + frac * step
        # opposite crossings belong to the same edge line
        for k in range(2):
            a, b = theta[k], theta[k + 2]
            phi = 0.5 * np.arctan2(np.sin(2 * a) + np.sin(2 * b), np.cos(2 * a) + np.cos(2 * b))
            dirs[n, k] = [np.cos(phi), np.sin(phi)]
    score = resp[ys[idx], xs[idx]] * sym[idx]
    return pos[idx], dirs, score


# --- grid growth -----------------------------------------------------------------


def _angle_ok(v, d, cos_tol):
    n = np.linalg.norm(v)
    return n > 0 and abs(float(v @ d)) / n >= cos_tol


def _neighbor(pos, tree, dirs, s, d, used, cos_tol=np.cos(np.deg2rad(25))):
    """Nearest candidate from ``s`` along direction ``d`` sharing that edge direction."""
    k = min(len(pos), 24)
    dist, nn = tree.query(pos[s], k=k)
    best = None
    for dd, j in zip(np.atleast_1d(dist), np.atleast_1d(nn)):
        if j == s or j in used or dd < 3.0 or j >= len(pos):
            continue
        v = pos[j] - pos[s]
        if float(v @ d) <= 0 or not _angle_ok(v, d, cos_tol):
            continue
        if max(abs(float(dirs[j, 0] @ d)), abs(float(dirs[j, 1] @ d))) < cos_tol:
            continue
        best = j
        break
    return best


def _nearest_free(tree, pos, p, radius, used):
    for j in _sorted_ball(tree, pos, p, radius):
        if j not in used:
            return j
    return None


def _sorted_ball(tree, pos, p, radius):
    idx = tree.query_ball_point(p, radius)
    return sorted(idx, key=lambda j: float(np.sum((pos[j] - p) ** 2)))


def _seed_grid(pos, dirs, tree, s):
    d1, d2 = dirs[s, 0], dirs[s, 1]
    used = {s}
    nb = {}
    for key, d in (("r", d1), ("l", -d1), ("d", d2), ("u", -d2)):
        j = _neighbor(pos, tree, dirs, s, d, used)
        if j is None:
            return None
        nb[key] = j
        used.add(j)
    grid = -np.ones((3, 3), dtype=int)
    grid[1, 1] = s
    grid[1, 2], grid[1, 0], grid[2, 1], grid[0, 1] = nb["r"], nb["l"], nb["d"], nb["u"]
    for r, c, a, b in ((0, 0, "u", "l"), (0, 2, "u", "r"), (2, 0, "d", "l"), (2, 2, "d", "r")):
        p = pos[nb[a]] + pos[nb[b]] - pos[s]
        spacing = min(np.linalg.norm(pos[nb[a]] - pos[s]), np.linalg.norm(pos[nb[b]] - pos[s]))
        j = _nearest_free(tree, pos, p, 0.35 * spacing, used)
        if j is None:
            return None
        grid[r, c] = j
        used.add(j)
    return grid


def _predict_row(pos, grid, side):
    """Predict the next line of corners beyond ``side`` of the grid.

    Returns predicted points (n, 2) and local spacing per point.
    """
    g = grid if side in ("bottom", "top") else grid.T
    if side in ("top", "left"):
        g = g[::-1]
    nr, nc = g.shape
    preds = np.empty((nc, 2))
    spacing = np.empty(nc)
    rows = np.arange(max(0, nr - 3), nr)
    for c in range(nc):
        cols = np.arange(max(0, c - 2), min(nc, c + 3))
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        src = np.column_stack([cc.ravel(), rr.ravel()]).astype(float)
        dst = pos[g[rr, cc].ravel()]
        if len(rows) >= 2 and len(cols) >= 2:
            H = estimate_homography(dst, src)
            preds[c] = apply_homography(H, [[c, nr]])[0]
        else:
            preds[c] = 2 * pos[g[-1, c]] - pos[g[-2, c]]
        spacing[c] = np.linalg.norm(pos[g[-1, c]] - pos[g[-2, c]])
    return preds, spacing


def _append(grid, side, new):
    if side == "bottom":
        return np.vstack([grid, new[None]])
    if side == "top":
        return np.vstack([new[None], grid])
    if side == "right":
        return np.hstack([grid, new[:, None]])
    return np.hstack([new[:, None], grid])


def _grow(pos, tree, grid, max_dim):
    used = set(grid.ravel().tolist())
    grew = True
    while grew:
        grew = False
        for side in ("bottom", "top", "right", "left"):
            along = grid.shape[0] if side in ("bottom", "top") else grid.shape[1]
            other = grid.shape[1] if side in ("bottom", "top") else grid.shape[0]
            if along >= max_dim:
                continue
            try:
                preds, spacing = _predict_row(pos, grid, side)
            except Exception:
                continue
            new = []
            taken = set()
            for p, sp in zip(preds, spacing):
                j = _nearest_free(tree, pos, p, 0.3 * sp, used | taken)
                if j is None:
                    break
                new.append(j)
                taken.add(j)
            if len(new) == other:
                grid = _append(grid, side, np.array(new))
                used |= taken
                grew = True
    return grid


# --- orientation ---------------------------------------------------------------


def _labelings(shape, rows, cols):
    """Index maps (rows, cols) -> (r, c) into a grid of ``shape``, for all D4 symmetries that fit."""
    out = []
    nr, nc = shape
    for transpose in (False, True):
        gr, gc = (nc, nr) if transpose else (nr, nc)
        if (gr, gc) != (rows, cols):
            continue
        for fr in (False, True):
            for fc in (False, True):
                i, j = np.mgrid[0:rows, 0:cols]
                i = rows - 1 - i if fr else i
                j = cols - 1 - j if fc else j
                out.append((j, i) if transpose else (i, j))
    return out


def _square_parity_score(g, corners):
    """Positive when squares with even (a + b) are brighter than odd ones."""
    centers = 0.25 * (corners[:-1, :-1] + corners[1:, :-1] + corners[:-1, 1:] + corners[1:, 1:])
    vals = ndimage.map_coordinates(g, [centers[..., 1].ravel(), centers[..., 0].ravel()], order=1)
    a, b = np.mgrid[0 : centers.shape[0], 0 : centers.shape[1]]
    even = ((a + b) % 2 == 0).ravel()
    return float(vals[even].mean() - vals[~even].mean())


def _handedness(corners):
    du = corners[:, 1:] - corners[:, :-1]
    dv = corners[1:, :] - corners[:-1, :]
    cross = du[:-1, :, 0] * dv[:, :-1, 1] - du[:-1, :, 1] * dv[:, :-1, 0]
    return float(np.sign(np.median(cross)))


def canonicalize(g, grid_pts, rows, cols):
    """Pick the labeling of a grid of points (nr, nc, 2) matching the board.

    Corner (0, 0) is the one whose diagonal squares are light; among
    colour-consistent labelings the front-facing one (columns go clockwise
    into rows, as on an upright board) wins.
    """
    cands = []
    for i, j in _labelings(grid_pts.shape[:2], rows, cols):
        lab = grid_pts[i, j]
        if _square_parity_score(g, lab) > 0:
            cands.append(lab)
    if len(cands) > 1:
        cands = [c for c in cands if _handedness(c) > 0]
    if len(cands) != 1:
        raise NotFound("ambiguous_orientation", f"{len(cands)} consistent labelings")
    return cands[0]


def _quads_consistent(corners) -> bool:
    a = corners[:-1, :-1]
    b = corners[:-1, 1:]
    c = corners[1:, 1:]
    d = corners[1:, :-1]
    signs = []
    for p, q, r in ((a, b, c), (b, c, d), (c, d, a), (d, a, b)):
        e1 = q - p
        e2 = r - q
        signs.append(np.sign(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]))
    s = np.stack(signs)
    return bool(np.all(s == s.flat[0]) and s.flat[0] != 0)


# --- subpixel refinement ---------------------------------------------------------


def _quadric_pinv(r: int):
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1].astype(float)
    dx, dy = dx.ravel(), dy.ravel()
    A = np.column_stack([dx * dx, dx * dy, dy * dy, dx, dy, np.ones_like(dx)])
    return np.linalg.pinv(A), dx, dy


@dataclass
class RefineResult:
    corners: np.ndarray
    flagged: np.ndarray
    response: np.ndarray
    iterations: int = 0


def refine_subpixel(
    frame,
    corner_estimates,
    radius: int = 4,
    max_iter: int = 10,
    tol: float = 0.01,
    max_shift: float = 2.0,
    blur_sigma: float = 0.0,
    check_border: bool = True,
) -> RefineResult:
    """Iterative saddle fit.

    A quadric ``a x^2 + b xy + c y^2 + d x + e y + f`` is fitted to the
    (2r+1)^2 samples centred on the current estimate (cubic spline
    interpolation) and the estimate jumps to its stationary point.
    Corners without a saddle (``4ac - b^2 >= 0``), or that drift more than
    ``max_shift`` from the estimate, are flagged.
    """
    img = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    img = img.astype(np.float64)
    if blur_sigma > 0:
        img = ndimage.gaussian_filter(img, blur_sigma)
    coeffs = ndimage.spline_filter(img, order=3)
    est0 = np.asarray(corner_estimates, dtype=float).reshape(-1, 2)
    h, w = img.shape
    if check_border and np.any((est0[:, 0] < radius) | (est0[:, 1] < radius) | (est0[:, 0] > w - 1 - radius) | (est0[:, 1] > h - 1 - radius)):
        raise ValidationError(f"corner estimates must be at least {radius} px from the border")
    P, dx, dy = _quadric_pinv(radius)
    est = est0.copy()
    active = np.ones(len(est), dtype=bool)
    flagged = np.zeros(len(est), dtype=bool)
    fit = np.zeros((len(est), 6))
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xs = est[idx, 0:1] + dx[None]
        ys = est[idx, 1:2] + dy[None]
        vals = ndimage.map_coordinates(coeffs, [ys.ravel(), xs.ravel()], order=3, prefilter=False, mode="nearest")
        cf = vals.reshape(len(idx), -1) @ P.T
        fit[idx] = cf
        a, b, c, d, e = cf[:, 0], cf[:, 1], cf[:, 2], cf[:, 3], cf[:, 4]
        det = 4 * a * c - b * b
        ok = det < -1e-12
        step = np.zeros((len(idx), 2))
        step[ok, 0] = (-2 * c[ok] * d[ok] + b[ok] * e[ok]) / det[ok]
        step[ok, 1] = (b[ok] * d[ok] - 2 * a[ok] * e[ok]) / det[ok]
        est[idx[ok]] += step[ok]
        bad = ~ok | (np.linalg.norm(est[idx] - est0[idx], axis=1) > max_shift)
        flagged[idx[bad]] = True
        converged = np.linalg.norm(step, axis=1) < tol
        active[idx[bad | converged]] = False
        off = (est[:, 0] < radius) | (est[:, 1] < radius) | (est[:, 0] > w - 1 - radius) | (est[:, 1] > h - 1 - radius)
        flagged |= off
        active &= ~off
    det = 4 * fit[:, 0] * fit[:, 2] - fit[:, 1] ** 2
    flagged |= det >= 0
    response = np.sqrt(np.maximum(-det, 0.0))
    return RefineResult(est, flagged, response, it)


# --- front end ---------------------------------------------------------------------


def detect_checkerboard(frame, board: BoardSpec, opts: DetectorOptions = DetectorOptions()) -> Detection:
    """Complete, canonically ordered corner grid or :class:`NotFound`."""
    img = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    ts = frame.timestamp if isinstance(frame, Frame) else 0
    h, w = img.shape
    if w < 10 * board.cols or h < 10 * board.rows:
        raise ValidationError(f"frame {w}x{h} too small for a {board.rows}x{board.cols} board")
    pos, dirs, score = find_candidates(img, opts)
    if len(pos) < board.n_corners:
        raise NotFound("too_few_candidates", f"{len(pos)} candidates")
    tree = cKDTree(pos)
    order = np.lexsort((pos[:, 1], pos[:, 0], -score))
    max_dim = max(board.rows, board.cols)
    best_shape = (0, 0)
    grid = None
    tried = 0
    for s in order:
        if tried >= opts.max_seeds:
            break
        seed = _seed_grid(pos, dirs, tree, int(s))
        if seed is None:
            continue
        tried += 1
        g_idx = _grow(pos, tree, seed, max_dim)
        if sorted(g_idx.shape) == sorted((board.rows, board.cols)):
            grid = g_idx
            break
        if g_idx.size > best_shape[0] * best_shape[1]:
            best_shape = g_idx.shape
    if grid is None:
        raise NotFound("grid_incomplete", f"largest grid {best_shape[0]}x{best_shape[1]}")
    g = ndimage.gaussian_filter(img.astype(np.float64), opts.blur_sigma)
    labeled = canonicalize(g, pos[grid], board.rows, board.cols)
    ref = refine_subpixel(img, labeled.reshape(-1, 2), radius=opts.refine_radius, blur_sigma=opts.refine_blur)
    if np.any(ref.flagged):
        raise NotFound("saddle_rejected", f"{int(ref.flagged.sum())} corners without a saddle")
    corners = ref.corners.reshape(board.rows, board.cols, 2)
    if not _quads_consistent(corners):
        raise NotFound("grid_incomplete", "inconsistent quad orientation")
    return Detection(int(ts), corners, board.board_points(), float(ref.response.mean()))


def detection_ratio(detections_a: int, detections_b: int) -> float:
    """Success ratio ``a / b`` (e.g. reconstructed-frame over ground-truth-frame detections)."""
    if detections_b == 0:
        raise ZeroDivisionError("reference detection count is zero")
    return detections_a / detections_b


# --- coverage ----------------------------------------------------------------------


@dataclass
class CoverageMap:
    image_size: tuple[int, int]  # (width, height)
    cells: int = COVERAGE_CELLS
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.cells, self.cells), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fraction_covered(self) -> float:
        return float(np.count_nonzero(self.counts)) / self.counts.size

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Cells are (lo, hi]; a point on a boundary goes to the lower-index cell."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        w, h = self.image_size
        cu = np.ceil(pts[:, 0] / (w / self.cells)).astype(int) - 1
        cv = np.ceil(pts[:, 1] / (h / self.cells)).astype(int) - 1
        return np.clip(cv, 0, self.cells - 1), np.clip(cu, 0, self.cells - 1)

    def merge(self, other: "CoverageMap") -> "CoverageMap":
        return CoverageMap(self.image_size, self.cells, self.counts + other.counts)


def accumulate_coverage(cov: CoverageMap, det: Detection) -> CoverageMap:
    rows, cols = cov.cell_index(det.image_points)
    np.add.at(cov.counts, (rows, cols), 1)
    return cov
