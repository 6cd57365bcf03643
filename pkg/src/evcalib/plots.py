"""Dependency-free plot images (binary PGM with header comments) and CSV tables."""

from __future__ import annotations

import csv
import os

import numpy as np

from .calib import CalibrationResult
from .detect import CoverageMap

HIST_BINS = 20


def write_pgm(path, pixels: np.ndarray, comments=()) -> None:
    """8-bit P5 image; ``comments`` become ``#`` header lines (annotations)."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = px.shape
    header = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(px.tobytes())


def coverage_image(cov: CoverageMap) -> np.ndarray:
    """Cell counts scaled to 0..255, each cell painted over its image area."""
    w, h = cov.image_size
    peak = cov.counts.max()
    cells = np.zeros(cov.counts.shape) if peak == 0 else cov.counts / peak
    ys = np.minimum((np.arange(h) * cov.cells) // h, cov.cells - 1)
    xs = np.minimum((np.arange(w) * cov.cells) // w, cov.cells - 1)
    return np.round(255 * cells[ys[:, None], xs[None, :]]).astype(np.uint8)


def residual_magnitudes(result: CalibrationResult) -> np.ndarray:
    mags = []
    for k, dets in enumerate(result.detections or []):
        for det in dets:
            v = result.observations[k].get(int(det.frame_timestamp))
            if v is None:
                continue
            uv = result.cameras[k].project(result.camera_pose(k, v), det.object_points)
            mags.append(np.linalg.norm(uv - det.image_points, axis=1))
    return np.concatenate(mags) if mags else np.zeros(0)


def residual_histogram(mags: np.ndarray, bins: int = HIST_BINS):
    """(edges, counts); all-zero residuals collapse to a single bin at 0."""
    mags = np.asarray(mags, dtype=float)
    if mags.size == 0:
        return np.array([0.0, 0.0]), np.zeros(1, dtype=np.int64)
    top = float(mags.max())
    if top == 0.0:
        return np.array([0.0, 0.0]), np.array([mags.size], dtype=np.int64)
    counts, edges = np.histogram(mags, bins=bins, range=(0.0, top))
    return edges, counts.astype(np.int64)


def bar_image(values, height: int = 100, bar_width: int = 10, gap: int = 2) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    n = max(len(values), 1)
    img = np.zeros((height, n * (bar_width + gap) + gap), dtype=np.uint8)
    peak = values.max() if values.size and values.max() > 0 else 1.0
    for i, v in enumerate(values):
        bar = int(round((height - 1) * v / peak))
        x0 = gap + i * (bar_width + gap)
        if bar > 0:
            img[height - bar :, x0 : x0 + bar_width] = 255
    return img


def quartiles(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def emit_plots(report, result: CalibrationResult | None, out_dir, coverage=None, stereo_deviations=None) -> list[str]:
    """Coverage heatmaps, residual histogram and (if given) the stereo deviation summary.

    ``stereo_deviations`` are translation deviations in meters from
    repeated stereo calibrations.  Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for k, cov in enumerate(coverage or []):
        p = os.path.join(out_dir, f"coverage_cam{k}.pgm")
        note = "empty: no detections" if cov.total == 0 else f"max cell count {int(cov.counts.max())}"
        write_pgm(p, coverage_image(cov), [f"coverage cells={cov.cells} total={cov.total}", note])
        written.append(p)

    mags = residual_magnitudes(result) if result is not None else np.zeros(0)
    edges, counts = residual_histogram(mags)
    p = os.path.join(out_dir, "residual_hist.pgm")
    note = "empty: no residuals" if mags.size == 0 else f"n={mags.size} max={float(mags.max())!r} px"
    write_pgm(p, bar_image(counts), ["residual magnitude histogram", note])
    written.append(p)
    p = os.path.join(out_dir, "residual_hist.csv")
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_px", "bin_hi_px", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    written.append(p)

    if stereo_deviations is not None:
        dev_mm = 1000.0 * np.asarray(stereo_deviations, dtype=float)
        p = os.path.join(out_dir, "stereo_deviation.txt")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            if dev_mm.size == 0:
                fh.write("translation deviation: no runs\n")
            else:
                q = quartiles(dev_mm)
                fh.write(f"translation deviation over {dev_mm.size} runs (mm)\n")
                fh.writelines(f"{k} {v:.4f}\n" for k, v in q.items())
        written.append(p)
        p = os.path.join(out_dir, "stereo_deviation.pgm")
        write_pgm(p, bar_image(dev_mm), ["translation deviation per run (mm)", f"runs={dev_mm.size}"])
        written.append(p)
        p = os.path.join(out_dir, "stereo_deviation.csv")
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "deviation_mm"])
            for i, d in enumerate(dev_mm):
                w.writerow([i, repr(float(d))])
        written.append(p)
    return written
