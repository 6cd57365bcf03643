"""Pinhole camera with radial-tangential or equidistant distortion.

Distortion acts on normalized coordinates ``(x, y) = (X/Z, Y/Z)``:

* ``pinhole_radtan`` (k1, k2, p1, p2)::

      r2 = x^2 + y^2
      x' = x (1 + k1 r2 + k2 r2^2) + 2 p1 x y + p2 (r2 + 2 x^2)
      y' = y (1 + k1 r2 + k2 r2^2) + p1 (r2 + 2 y^2) + 2 p2 x y

* ``pinhole_equi`` (k1..k4), with ``theta = atan(r)``::

      theta_d = theta (1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8)
      (x', y') = theta_d / r * (x, y)

Pixels are ``u = fx x' + cx``, ``v = fy y' + cy`` (zero skew).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, NoConvergence, ValidationError
from .geometry import Pose

MODELS = ("pinhole_none", "pinhole_radtan", "pinhole_equi")
MIN_DEPTH = 1e-6


@dataclass(frozen=True, eq=False)
class CameraModel:
    model: str
    fx: float
    fy: float
    cx: float
    cy: float
    dist: np.ndarray = field(default_factory=lambda: np.zeros(4))
    sensor_size: tuple[int, int] = (500, 500)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError(f"unknown camera model {self.model!r}")
        dist = np.zeros(4) if self.dist is None else np.asarray(self.dist, dtype=float).reshape(4)
        if self.model == "pinhole_none" and np.any(dist != 0):
            raise ValidationError("pinhole_none requires zero distortion")
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "sensor_size", (int(self.sensor_size[0]), int(self.sensor_size[1])))

    def validate(self) -> None:
        w, h = self.sensor_size
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ValidationError("principal point outside the sensor")

    # --- parameter vector ----------------------------------------------------

    @property
    def n_params(self) -> int:
        return 4 if self.model == "pinhole_none" else 8

    @property
    def param_names(self) -> list[str]:
        names = ["fx", "fy", "cx", "cy"]
        if self.model == "pinhole_radtan":
            names += ["k1", "k2", "p1", "p2"]
        elif self.model == "pinhole_equi":
            names += ["k1", "k2", "k3", "k4"]
        return names

    @property
    def params(self) -> np.ndarray:
        p = np.array([self.fx, self.fy, self.cx, self.cy])
        return p if self.model == "pinhole_none" else np.concatenate([p, self.dist])

    def with_params(self, p) -> "CameraModel":
        p = np.asarray(p, dtype=float)
        dist = self.dist if self.model == "pinhole_none" else p[4:8]
        return replace(self, fx=p[0], fy=p[1], cx=p[2], cy=p[3], dist=dist)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    # --- distortion ----------------------------------------------------------

    def distort(self, xy, jacobians: bool = False):
        """Map normalized points (N, 2) to distorted normalized points.

        With ``jacobians`` also returns d(out)/d(xy) (N, 2, 2) and
        d(out)/d(dist) (N, 2, 4).
        """
        xy = np.asarray(xy, dtype=float)
        x, y = xy[:, 0], xy[:, 1]
        n = xy.shape[0]
        if self.model == "pinhole_none":
            if not jacobians:
                return xy.copy()
            J = np.zeros((n, 2, 2))
            J[:, 0, 0] = J[:, 1, 1] = 1.0
            return xy.copy(), J, np.zeros((n, 2, 4))
        if self.model == "pinhole_radtan":
            return _radtan(self.dist, x, y, jacobians)
        return _equi(self.dist, x, y, jacobians)

    # --- projection ----------------------------------------------------------

    def project_points(self, Xc, jacobians: bool = False):
        """Project camera-frame points (N, 3) to pixels (N, 2).

        With ``jacobians`` returns ``(uv, d_uv/d_Xc (N,2,3), d_uv/d_params (N,2,n_params))``.
        """
        Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
        z = Xc[:, 2]
        if np.any(z <= MIN_DEPTH):
            raise BehindCamera(f"{int(np.count_nonzero(z <= MIN_DEPTH))} point(s) at z <= {MIN_DEPTH}")
        inv_z = 1.0 / z
        xy = Xc[:, :2] * inv_z[:, None]
        f = np.array([self.fx, self.fy])
        c = np.array([self.cx, self.cy])
        if not jacobians:
            return self.distort(xy) * f + c
        xyd, Jd, Jdist = self.distort(xy, jacobians=True)
        uv = xyd * f + c
        n = Xc.shape[0]
        Jn = np.zeros((n, 2, 3))
        Jn[:, 0, 0] = inv_z
        Jn[:, 1, 1] = inv_z
        Jn[:, 0, 2] = -xy[:, 0] * inv_z
        Jn[:, 1, 2] = -xy[:, 1] * inv_z
        J_X = f[None, :, None] * np.einsum("nij,njk->nik", Jd, Jn)
        J_p = np.zeros((n, 2, self.n_params))
        J_p[:, 0, 0] = xyd[:, 0]
        J_p[:, 1, 1] = xyd[:, 1]
        J_p[:, 0, 2] = 1.0
        J_p[:, 1, 3] = 1.0
        if self.n_params == 8:
            J_p[:, :, 4:] = f[None, :, None] * Jdist
        return uv, J_X, J_p

    def project(self, pose: Pose, points3d, jacobians: bool = False):
        """Project target-frame points through ``pose`` (target -> camera)."""
        Xc = pose.apply(np.atleast_2d(points3d))
        return self.project_points(Xc, jacobians=jacobians)

    # --- inversion -----------------------------------------------------------

    def undistort(self, xyd, tol: float = 1e-10, max_iter: int = 50):
        """Invert :meth:`distort`.  Returns (points (N,2), ok mask (N,))."""
        xyd = np.atleast_2d(np.asarray(xyd, dtype=float))
        if self.model == "pinhole_none":
            return xyd.copy(), np.ones(len(xyd), dtype=bool)
        if self.model == "pinhole_radtan":
            return self._undistort_radtan(xyd, tol, max_iter)
        theta, ok = self._invert_theta(np.hypot(xyd[:, 0], xyd[:, 1]), tol, max_iter)
        xy = np.zeros_like(xyd)
        rd = np.hypot(xyd[:, 0], xyd[:, 1])
        good = ok & (theta < np.pi / 2)
        scale = np.where(rd > 1e-15, np.tan(np.where(good, theta, 0.0)) / np.where(rd > 1e-15, rd, 1.0), 1.0)
        xy = xyd * scale[:, None]
        return xy, good

    def _undistort_radtan(self, xyd, tol, max_iter):
        k1, k2 = self.dist[0], self.dist[1]
        r_fold = _first_positive_root([1.0, 3 * k1, 5 * k2])  # d(r * radial)/dr = 0
        xy = xyd.copy()
        active = np.ones(len(xy), dtype=bool)
        ok = np.zeros(len(xy), dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            cur = xy[idx]
            out, J, _ = _radtan(self.dist, cur[:, 0], cur[:, 1], True)
            res = out - xyd[idx]
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            safe = np.abs(det) > 1e-15
            step = np.zeros_like(cur)
            step[safe, 0] = (J[safe, 1, 1] * res[safe, 0] - J[safe, 0, 1] * res[safe, 1]) / det[safe]
            step[safe, 1] = (-J[safe, 1, 0] * res[safe, 0] + J[safe, 0, 0] * res[safe, 1]) / det[safe]
            # damp huge steps so iterates stay near the monotone branch
            norm = np.hypot(step[:, 0], step[:, 1])
            lim = 0.5 * (np.hypot(cur[:, 0], cur[:, 1]) + 0.1)
            step *= np.minimum(1.0, lim / np.maximum(norm, 1e-300))[:, None]
            xy[idx] = cur - step
            done = np.hypot(res[:, 0], res[:, 1]) < tol
            ok[idx[done]] = True
            active[idx[done | ~safe | ~np.isfinite(norm)]] = False
        r = np.hypot(xy[:, 0], xy[:, 1])
        _, J, _ = _radtan(self.dist, xy[:, 0], xy[:, 1], True)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        ok &= (r < r_fold) & (det > 0) & np.all(np.isfinite(xy), axis=1)
        return xy, ok

    def _theta_max(self) -> float:
        k = self.dist
        root = _first_positive_root([1.0, 3 * k[0], 5 * k[1], 7 * k[2], 9 * k[3]])
        return min(root, np.pi)

    def _invert_theta(self, rd, tol, max_iter):
        """Solve theta_d(theta) = rd on the monotone range [0, theta_max]."""
        k = self.dist
        tmax = self._theta_max()

        def f(t):
            t2 = t * t
            return t * (1 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))

        def df(t):
            t2 = t * t
            return 1 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))

        fmax = f(tmax)
        ok = (rd >= 0) & (rd <= fmax) & np.isfinite(rd)
        lo = np.zeros_like(rd)
        hi = np.full_like(rd, tmax)
        t = np.clip(rd, 0.0, tmax)
        for _ in range(max_iter + 50):
            res = f(t) - rd
            lo = np.where(res < 0, t, lo)
            hi = np.where(res > 0, t, hi)
            d = df(t)
            tn = t - res / np.where(d > 1e-12, d, 1e-12)
            bad = (tn <= lo) | (tn >= hi) | ~np.isfinite(tn)
            tn = np.where(bad, 0.5 * (lo + hi), tn)
            if np.all(np.abs(tn - t) < tol * 1e-2):
                t = tn
                break
            t = tn
        ok &= np.abs(f(t) - rd) < tol
        return t, ok

    def unproject_pixels(self, uv):
        """Unit rays (N, 3) for pixels (N, 2) plus an ok mask."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        xyd = np.column_stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy])
        if self.model == "pinhole_equi":
            rd = np.hypot(xyd[:, 0], xyd[:, 1])
            theta, ok = self._invert_theta(rd, 1e-10, 50)
            s = np.sin(theta)
            with np.errstate(invalid="ignore", divide="ignore"):
                dirx = np.where(rd > 1e-15, xyd[:, 0] / rd, 0.0)
                diry = np.where(rd > 1e-15, xyd[:, 1] / rd, 0.0)
            rays = np.column_stack([s * dirx, s * diry, np.cos(theta)])
            return rays, ok
        xy, ok = self.undistort(xyd)
        rays = np.column_stack([xy, np.ones(len(xy))])
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        return rays, ok

    # --- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "dist": [float(d) for d in self.dist],
            "sensor_size": list(self.sensor_size),
        }

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        return cls(d["model"], d["fx"], d["fy"], d["cx"], d["cy"], d.get("dist"), tuple(d["sensor_size"]))


def _first_positive_root(coeffs_in_r2) -> float:
    """Smallest r > 0 with sum_i c_i r^(2i) = 0 (inf if none)."""
    c = np.asarray(coeffs_in_r2, dtype=float)
    while len(c) > 1 and c[-1] == 0:
        c = c[:-1]
    if len(c) == 1:
        return np.inf
    roots = np.roots(c[::-1])
    real = roots[np.abs(roots.imag) < 1e-12].real
    real = real[real > 0]
    return float(np.sqrt(real.min())) if real.size else np.inf


def _radtan(dist, x, y, jacobians):
    k1, k2, p1, p2 = dist
    x2, y2, xy = x * x, y * y, x * y
    r2 = x2 + y2
    radial = 1 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2 * p1 * xy + p2 * (r2 + 2 * x2)
    yd = y * radial + p1 * (r2 + 2 * y2) + 2 * p2 * xy
    out = np.column_stack([xd, yd])
    if not jacobians:
        return out
    dr = k1 + 2 * k2 * r2  # d(radial)/d(r2)
    J = np.empty((len(x), 2, 2))
    J[:, 0, 0] = radial + 2 * x2 * dr + 2 * p1 * y + 6 * p2 * x
    J[:, 0, 1] = 2 * xy * dr + 2 * p1 * x + 2 * p2 * y
    J[:, 1, 0] = 2 * xy * dr + 2 * p1 * x + 2 * p2 * y
    J[:, 1, 1] = radial + 2 * y2 * dr + 6 * p1 * y + 2 * p2 * x
    Jd = np.empty((len(x), 2, 4))
    Jd[:, 0, 0] = x * r2
    Jd[:, 0, 1] = x * r2 * r2
    Jd[:, 0, 2] = 2 * xy
    Jd[:, 0, 3] = r2 + 2 * x2
    Jd[:, 1, 0] = y * r2
    Jd[:, 1, 1] = y * r2 * r2
    Jd[:, 1, 2] = r2 + 2 * y2
    Jd[:, 1, 3] = 2 * xy
    return out, J, Jd


def _equi(dist, x, y, jacobians):
    k1, k2, k3, k4 = dist
    r = np.hypot(x, y)
    small = r < 1e-7
    rs = np.where(small, 1.0, r)
    th = np.arctan(r)
    t2 = th * th
    poly = 1 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)))
    thd = th * poly
    s = np.where(small, 1.0, thd / rs)
    out = np.column_stack([s * x, s * y])
    if not jacobians:
        return out
    dthd = 1 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))
    dth_dr = 1.0 / (1.0 + r * r)
    ds_dr = (dthd * dth_dr * rs - thd) / (rs * rs)
    g = np.where(small, 2.0 * (k1 - 1.0 / 3.0), ds_dr / rs)
    J = np.empty((len(x), 2, 2))
    J[:, 0, 0] = s + g * x * x
    J[:, 0, 1] = g * x * y
    J[:, 1, 0] = g * x * y
    J[:, 1, 1] = s + g * y * y
    Jd = np.empty((len(x), 2, 4))
    base = np.where(small, 0.0, th / rs)
    for i in range(4):
        coef = base * t2 ** (i + 1)
        Jd[:, 0, i] = coef * x
        Jd[:, 1, i] = coef * y
    return out, J, Jd


# --- scalar convenience API ------------------------------------------------------


def project(model: CameraModel, pose: Pose, point3d) -> np.ndarray:
    """Pixel of one target-frame point; raises :class:`BehindCamera`."""
    return model.project(pose, np.asarray(point3d, dtype=float).reshape(1, 3))[0]


def unproject(model: CameraModel, pixel) -> np.ndarray:
    """Unit viewing ray of one pixel; raises :class:`NoConvergence` outside the valid range."""
    pixel = np.asarray(pixel, dtype=float).reshape(1, 2)
    if not np.all(np.isfinite(pixel)):
        raise ValidationError("pixel must be finite")
    rays, ok = model.unproject_pixels(pixel)
    if not ok[0]:
        raise NoConvergence(f"pixel {pixel[0].tolist()} outside the invertible distortion range")
    return rays[0]
