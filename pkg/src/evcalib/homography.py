"""Normalized DLT homography between a plane and its image."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(np.sum((pts - c) ** 2, axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_spread(pts: np.ndarray, name: str) -> None:
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 0 or sv[1] / sv[0] < 1e-9:
        raise DegenerateConfiguration(f"{name} points are collinear")


def estimate_homography(corners2d, board_points, return_residual: bool = False):
    """H with ``corners ~ H @ [X, Y, 1]``, ``||H||_F = 1``, positive depth at the board centroid.

    ``board_points`` may be (N, 2) or (N, 3) with z = 0.
    """
    dst = np.asarray(corners2d, dtype=float).reshape(-1, 2)
    src = np.asarray(board_points, dtype=float).reshape(len(dst), -1)[:, :2]
    if len(dst) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    _check_spread(src, "board")
    _check_spread(dst, "image")
    Ts = _normalizer(src)
    Td = _normalizer(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    if len(sv) >= 9 and sv[-2] < 1e-12 * sv[0]:
        raise DegenerateConfiguration("homography is not unique")
    H = np.linalg.inv(Td) @ Hn @ Ts
    H /= np.linalg.norm(H)
    centroid = np.array([*src.mean(axis=0), 1.0])
    if (H @ centroid)[2] < 0:
        H = -H
    if not return_residual:
        return H
    return H, float(sv[-1])


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    hp = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return hp[:, :2] / hp[:, 2:3]
