"""Event data model, CSV/EVT1 file formats and time-window slicing.

Events are held in a numpy structured array with fields ``t`` (uint64
microseconds), ``x``/``y`` (uint16 pixel coordinates) and ``p`` (int8
polarity in {-1, +1}).  The in-memory dtype is the packed little-endian
EVT1 record, so binary I/O is a single buffer copy.
"""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import BadMagic, MalformedLine, OutOfBounds, TruncatedRecord, ValidationError, ZeroWindow

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
EVT1_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHQ")


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def make_events(t, x, y, p) -> np.ndarray:
    """Pack parallel arrays into an event record array (no sorting, no checks)."""
    t = np.asarray(t)
    out = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


@dataclass(frozen=True, eq=False)
class EventStream:
    """Immutable, time-sorted events of one sensor."""

    sensor_size: tuple[int, int]
    events: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=EVENT_DTYPE))
    n_reordered: int = 0

    def __post_init__(self):
        ev = np.asarray(self.events)
        if ev.dtype != EVENT_DTYPE:
            ev = ev.astype(EVENT_DTYPE)
        ev.flags.writeable = False
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "sensor_size", (int(self.sensor_size[0]), int(self.sensor_size[1])))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for rec in self.events:
            yield Event(int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))

    def __getitem__(self, i: int) -> Event:
        rec = self.events[i]
        return Event(int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return self.sensor_size == other.sensor_size and np.array_equal(self.events, other.events)

    @property
    def t(self) -> np.ndarray:
        return self.events["t"]

    @property
    def width(self) -> int:
        return self.sensor_size[0]

    @property
    def height(self) -> int:
        return self.sensor_size[1]

    @classmethod
    def from_arrays(cls, sensor_size, t, x, y, p, check: bool = True) -> "EventStream":
        return _finalize(make_events(t, x, y, p), sensor_size, check=check)


@dataclass(frozen=True, eq=False)
class Chunk:
    """Half-open time window ``[t_start, t_end)`` over an event stream.

    ``t_ref`` is the reconstruction reference time: ``t_end`` for fixed
    slicing, the requested center for :func:`slice_at_times`.
    """

    t_start: int
    t_end: int
    events: np.ndarray
    t_ref: int | None = None

    def __post_init__(self):
        if self.t_end - self.t_start <= 0:
            raise ZeroWindow(self.t_end - self.t_start)
        if self.t_ref is None:
            object.__setattr__(self, "t_ref", self.t_end)

    def __len__(self) -> int:
        return len(self.events)


def count_inversions(order: np.ndarray) -> int:
    """Pairs ``i < j`` with ``rank[i] > rank[j]`` for the stable sort ``order``.

    Bottom-up merge counting: at each level, every element of a right block
    counts the elements of its left sibling block ranked above it.
    """
    n = len(order)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    total = 0
    width = 1
    idx = np.arange(n)
    while width < n:
        block = idx // width
        # sort within blocks of size `width` (carried from the previous level)
        key = block * n + rank
        srt = np.sort(key)
        vals = srt - (srt // n) * n
        pair = (idx // width) // 2
        is_right = ((idx // width) % 2) == 1
        left_keys = np.where(~is_right, pair * n + vals, -1)
        left_sorted = np.sort(left_keys[left_keys >= 0])
        rv = vals[is_right]
        rp = pair[is_right]
        # left-block elements of the same pair with rank > rv
        hi = np.searchsorted(left_sorted, rp * n + n, side="left")
        le = np.searchsorted(left_sorted, rp * n + rv, side="right")
        total += int(np.sum(hi - le))
        width *= 2
    return total


def _finalize(events: np.ndarray, sensor_size, check: bool = True) -> EventStream:
    """Stable-sort by time, bounds-check, and count reorderings."""
    if sensor_size is None:
        if len(events):
            sensor_size = (int(events["x"].max()) + 1, int(events["y"].max()) + 1)
        else:
            sensor_size = (0, 0)
    n_reordered = 0
    if len(events) > 1:
        t = events["t"]
        if np.any(t[1:] < t[:-1]):
            order = np.argsort(t, kind="stable")
            n_reordered = count_inversions(order)
            logger.warning("%d timestamp inversions repaired on load", n_reordered)
            events = events[order]
    if check and len(events):
        w, h = sensor_size
        bad = np.flatnonzero((events["x"] >= w) | (events["y"] >= h))
        if bad.size:
            i = int(bad[0])
            raise OutOfBounds(i, int(events["x"][i]), int(events["y"][i]), sensor_size)
        badp = np.flatnonzero((events["p"] != 1) & (events["p"] != -1))
        if badp.size:
            raise ValidationError(f"event {int(badp[0])} has polarity {int(events['p'][badp[0]])}")
    return EventStream(tuple(sensor_size), events, n_reordered)


# --- CSV -----------------------------------------------------------------------


def _read_text(source) -> str:
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, "r", encoding="ascii", newline=None) as fh:
            return fh.read()
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("ascii") if isinstance(data, bytes) else data
    if isinstance(source, bytes):
        return source.decode("ascii")
    return str(source)


def parse_csv(text_source, sensor_size=None) -> EventStream:
    """Parse ``t_us,x,y,p`` lines into a sorted stream.

    ``text_source`` may be a path, a file object, or the CSV text itself.
    Polarity 0 is read as -1.  A first line that does not parse as numbers
    is treated as a header.  When ``sensor_size`` is omitted it is inferred
    from the largest coordinates.
    """
    text = _read_text(text_source)
    lines = text.splitlines()
    ts, xs, ys, ps = [], [], [], []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
            if t < 0 or x < 0 or y < 0 or p not in (-1, 0, 1):
                raise ValueError
        except ValueError:
            if line_no == 1 and not ts:
                continue  # header
            raise MalformedLine(line_no, raw) from None
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(1 if p == 1 else -1)
    return _finalize(make_events(np.array(ts, dtype=np.uint64), xs, ys, ps), sensor_size)


def write_csv(stream: EventStream, dest) -> None:
    ev = stream.events
    body = io.StringIO()
    body.write("t_us,x,y,p\n")
    if len(ev):
        np.savetxt(
            body,
            np.column_stack([ev["t"].astype(np.int64), ev["x"], ev["y"], ev["p"]]),
            fmt="%d",
            delimiter=",",
        )
    text = body.getvalue()
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)


# --- EVT1 ----------------------------------------------------------------------


def write_binary(stream: EventStream, dest=None) -> bytes | None:
    """Serialize to EVT1.  Returns the bytes when ``dest`` is None."""
    w, h = stream.sensor_size
    payload = _HEADER.pack(EVT1_MAGIC, w, h, len(stream.events)) + stream.events.tobytes()
    if dest is None:
        return payload
    if hasattr(dest, "write"):
        dest.write(payload)
    else:
        with open(dest, "wb") as fh:
            fh.write(payload)
    return None


def parse_binary(byte_source) -> EventStream:
    """Parse an EVT1 buffer, path, or binary file object."""
    if isinstance(byte_source, (bytes, bytearray, memoryview)):
        data = bytes(byte_source)
    elif hasattr(byte_source, "read"):
        data = byte_source.read()
    else:
        with open(byte_source, "rb") as fh:
            data = fh.read()
    if len(data) < 4 or data[:4] != EVT1_MAGIC:
        raise BadMagic(f"expected magic {EVT1_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedRecord(len(data))
    _, w, h, count = _HEADER.unpack_from(data, 0)
    rec = EVENT_DTYPE.itemsize
    available = (len(data) - _HEADER.size) // rec
    if available < count:
        raise TruncatedRecord(_HEADER.size + available * rec)
    events = np.frombuffer(data, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size).copy()
    return _finalize(events, (w, h))


def load_events(path, sensor_size=None) -> EventStream:
    """Dispatch on file contents: EVT1 magic, else CSV."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EVT1_MAGIC:
        return parse_binary(path)
    return parse_csv(path, sensor_size=sensor_size)


# --- slicing -------------------------------------------------------------------


def slice_fixed_duration(
    stream: EventStream, window_us: int, t0: int = 0, t_stop: int | None = None
) -> list[Chunk]:
    """Contiguous windows ``[t0 + k*w, t0 + (k+1)*w)``; empty windows are kept.

    Chunks are emitted until the last event is covered, or until ``t_stop``
    (exclusive end of coverage) if that is later.
    """
    window_us = int(window_us)
    if window_us <= 0:
        raise ZeroWindow(window_us)
    t = stream.t
    if len(t) and int(t[0]) < t0:
        raise ValidationError(f"t0={t0} is after the first event at {int(t[0])}")
    last = int(t[-1]) if len(t) else None
    n = 0 if last is None else (last - t0) // window_us + 1
    if t_stop is not None and t_stop > t0:
        n = max(n, -(-(int(t_stop) - t0) // window_us))
    starts = t0 + window_us * np.arange(n + 1, dtype=np.int64)
    idx = np.searchsorted(t, starts.astype(np.uint64), side="left")
    ev = stream.events
    return [
        Chunk(int(starts[k]), int(starts[k + 1]), ev[idx[k] : idx[k + 1]])
        for k in range(n)
    ]


def slice_at_times(stream: EventStream, centers: Sequence[int], window_us: int) -> list[Chunk]:
    """One window ``[c - w/2, c + w/2)`` per center; windows may overlap."""
    window_us = int(window_us)
    if window_us <= 0:
        raise ZeroWindow(window_us)
    centers = [int(c) for c in centers]
    if any(b < a for a, b in zip(centers, centers[1:])):
        raise ValidationError("centers must be sorted ascending")
    t = stream.t
    chunks = []
    half = window_us // 2
    for c in centers:
        start = c - half
        end = start + window_us
        lo = np.searchsorted(t, np.uint64(max(start, 0)), side="left")
        hi = np.searchsorted(t, np.uint64(max(end, 0)), side="left")
        chunks.append(Chunk(start, end, stream.events[lo:hi], t_ref=c))
    return chunks
