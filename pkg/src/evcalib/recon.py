"""Event-to-frame reconstruction by direct integration.

Each event moves its pixel's log-intensity estimate by ``p * C``.  The
state persists across chunks, so a frame shows the scene's log intensity
relative to the start of the recording (up to one threshold of
quantization), not just the edges that moved during the last window.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import CountMismatch, MixedResolutions, ValidationError
from .events import Chunk, EventStream, slice_fixed_duration
from .imageio import list_images, read_gray

DEFAULT_C = 0.3
PROVENANCE = ("integrated", "leaky", "imported")


@dataclass(frozen=True, eq=False)
class Frame:
    timestamp: int
    pixels: np.ndarray
    provenance: str = "integrated"

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def sensor_size(self) -> tuple[int, int]:
        return (self.pixels.shape[1], self.pixels.shape[0])


@dataclass
class ReconState:
    log_intensity: np.ndarray  # (height, width) float64
    last_time: np.ndarray  # (height, width) int64, microseconds

    @classmethod
    def zeros(cls, sensor_size, t0: int = 0) -> "ReconState":
        w, h = sensor_size
        return cls(np.zeros((h, w)), np.full((h, w), int(t0), dtype=np.int64))

    def copy(self) -> "ReconState":
        return ReconState(self.log_intensity.copy(), self.last_time.copy())


def _flat_index(events, width):
    return events["y"].astype(np.int64) * width + events["x"].astype(np.int64)


def integrate_chunk(state: ReconState, chunk: Chunk | np.ndarray, C: float) -> ReconState:
    """Add ``C * sum(polarities)`` per pixel.  Updates ``state`` in place and returns it."""
    events = chunk.events if isinstance(chunk, Chunk) else chunk
    if len(events):
        h, w = state.log_intensity.shape
        idx = _flat_index(events, w)
        delta = np.bincount(idx, weights=events["p"].astype(np.float64), minlength=h * w)
        state.log_intensity += C * delta.reshape(h, w)
        touched = np.zeros(h * w, dtype=bool)
        touched[idx] = True
        last = np.zeros(h * w, dtype=np.int64)
        np.maximum.at(last, idx, events["t"].astype(np.int64))
        lt = state.last_time.ravel()
        lt[touched] = np.maximum(lt[touched], last[touched])
    return state


def leaky_integrate_chunk(state: ReconState, chunk: Chunk, C: float, decay_tau_us: float) -> ReconState:
    """Integration with exponential decay toward 0, evaluated at ``chunk.t_end``.

    Between events a pixel decays by ``exp(-dt / tau)``.  The linear ODE
    lets all events of the chunk be folded in at once:
    ``v(T) = v(t_last) e^{-(T - t_last)/tau} + C sum_k p_k e^{-(T - t_k)/tau}``.
    """
    if decay_tau_us <= 0:
        raise ValidationError("decay_tau_us must be positive")
    T = int(chunk.t_end)
    h, w = state.log_intensity.shape
    elapsed = (T - state.last_time).astype(np.float64)
    state.log_intensity *= np.exp(-elapsed / decay_tau_us)
    ev = chunk.events
    if len(ev):
        idx = _flat_index(ev, w)
        weight = ev["p"].astype(np.float64) * np.exp(-(T - ev["t"].astype(np.float64)) / decay_tau_us)
        state.log_intensity += C * np.bincount(idx, weights=weight, minlength=h * w).reshape(h, w)
    state.last_time[:] = T
    return state


def tonemap(state: ReconState | np.ndarray, timestamp: int | None = None, provenance: str = "integrated") -> Frame:
    """Map the [p2, p98] percentile range of the state to [0, 255]."""
    values = state.log_intensity if isinstance(state, ReconState) else np.asarray(state, dtype=float)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise ValidationError("state has no finite values")
    lo, hi = np.percentile(finite, [2.0, 98.0])
    if hi - lo <= 1e-12:
        pixels = np.full(values.shape, 128, dtype=np.uint8)
    else:
        scaled = (np.nan_to_num(values, nan=lo) - lo) * (255.0 / (hi - lo))
        pixels = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    if timestamp is None:
        timestamp = int(state.last_time.max()) if isinstance(state, ReconState) else 0
    return Frame(int(timestamp), pixels, provenance)


@dataclass(frozen=True)
class ReconOptions:
    mode: str = "integrated"  # or "leaky"
    contrast_threshold: float = DEFAULT_C
    decay_tau_us: float = 1e6
    reset_interval: int = 0  # chunks between state resets; 0 = never

    def __post_init__(self):
        if self.mode not in ("integrated", "leaky"):
            raise ValidationError(f"unknown reconstruction mode {self.mode!r}")
        if self.contrast_threshold <= 0:
            raise ValidationError("contrast threshold must be positive")


def reconstruct_chunks(chunks: Iterable[Chunk], sensor_size, options: ReconOptions = ReconOptions()) -> list[Frame]:
    """One frame per (contiguous) chunk, stamped with the chunk end time."""
    frames = []
    state = None
    for k, chunk in enumerate(chunks):
        if state is None or (options.reset_interval and k % options.reset_interval == 0):
            state = ReconState.zeros(sensor_size, chunk.t_start)
        if options.mode == "leaky":
            leaky_integrate_chunk(state, chunk, options.contrast_threshold, options.decay_tau_us)
        else:
            integrate_chunk(state, chunk, options.contrast_threshold)
        frames.append(tonemap(state, chunk.t_ref, options.mode))
    return frames


def reconstruct_stream(
    stream: EventStream,
    window_us: int = 50_000,
    options: ReconOptions = ReconOptions(),
    t0: int = 0,
    t_stop: int | None = None,
) -> list[Frame]:
    chunks = slice_fixed_duration(stream, window_us, t0=t0, t_stop=t_stop)
    return reconstruct_chunks(chunks, stream.sensor_size, options)


def reconstruct_at_times(
    stream: EventStream, centers: Sequence[int], options: ReconOptions = ReconOptions(), t0: int = 0
) -> list[Frame]:
    """Frames at arbitrary reference times (e.g. mid-exposure of a frame camera).

    The persistent state is advanced through ``[t_prev, c)`` for each center.
    """
    centers = [int(c) for c in centers]
    if any(b < a for a, b in zip(centers, centers[1:])):
        raise ValidationError("centers must be sorted ascending")
    t = stream.t
    state = ReconState.zeros(stream.sensor_size, t0)
    frames = []
    prev = t0
    lo = int(np.searchsorted(t, np.uint64(max(t0, 0)), side="left"))
    for c in centers:
        hi = int(np.searchsorted(t, np.uint64(max(c, 0)), side="left"))
        if c > prev:
            chunk = Chunk(prev, c, stream.events[lo:hi])
            if options.mode == "leaky":
                leaky_integrate_chunk(state, chunk, options.contrast_threshold, options.decay_tau_us)
            else:
                integrate_chunk(state, chunk, options.contrast_threshold)
        frames.append(tonemap(state, c, options.mode))
        lo, prev = hi, max(prev, c)
    return frames


_TS_RE = re.compile(r"(\d+)(?=\.[A-Za-z]+$)")


def timestamp_from_name(path) -> int:
    m = _TS_RE.search(os.path.basename(str(path)))
    if not m:
        raise ValidationError(f"no timestamp in file name {path}")
    return int(m.group(1))


def import_frames(source, timestamps: Sequence[int] | None = None) -> list[Frame]:
    """Load externally reconstructed images as frames tagged ``imported``.

    ``source`` is a directory or a list of image paths.  Without
    ``timestamps`` they are parsed from file names (``frame_<t_us>.png``).
    """
    paths = list_images(source) if isinstance(source, (str, os.PathLike)) and os.path.isdir(source) else list(source)
    if timestamps is None:
        timestamps = [timestamp_from_name(p) for p in paths]
    timestamps = [int(t) for t in timestamps]
    if len(timestamps) != len(paths):
        raise CountMismatch(f"{len(paths)} images but {len(timestamps)} timestamps")
    pairs = sorted(zip(timestamps, paths), key=lambda tp: tp[0])
    if any(b[0] <= a[0] for a, b in zip(pairs, pairs[1:])):
        raise ValidationError("timestamps must be strictly increasing")
    frames = []
    shape = None
    for t, path in pairs:
        px = read_gray(path)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise MixedResolutions(f"{path} is {px.shape[1]}x{px.shape[0]}, expected {shape[1]}x{shape[0]}")
        frames.append(Frame(t, px, "imported"))
    return frames
