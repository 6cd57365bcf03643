"""Text formats for intermediate artifacts: detection files and ground truth.

Detection file::

    # evcalib detections v1
    board <rows> <cols> <square_size>
    sensor <width> <height>
    frame <t_us> <quality>
    <u> <v>                  (rows * cols lines, row-major)
    ...
    rejects <n>
    <t_us> <reason>

Ground-truth file (one per camera)::

    # evcalib ground truth v1
    model <tag>
    sensor <width> <height>
    intrinsics <fx> <fy> <cx> <cy>
    distortion <d1> <d2> <d3> <d4>
    contrast_threshold <C>
    extrinsic <qw> <qx> <qy> <qz> <tx> <ty> <tz>    (camera 0 -> this camera)
    frames <n>
    <t_us> <qw> <qx> <qy> <qz> <tx> <ty> <tz>       (board -> this camera)
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .detect import Detection
from .errors import MalformedLine, ValidationError
from .geometry import Pose
from .imageio import write_gray
from .simulator import BoardSpec

DET_HEADER = "# evcalib detections v1"
GT_HEADER = "# evcalib ground truth v1"


def _f(v) -> str:
    return repr(float(v))


@dataclass
class DetectionSet:
    board: BoardSpec
    sensor_size: tuple[int, int]
    detections: list[Detection] = field(default_factory=list)
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def attempted(self) -> int:
        return len(self.detections) + len(self.rejects)

    def reject_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, reason in self.rejects:
            out[reason] = out.get(reason, 0) + 1
        return dict(sorted(out.items()))


def format_detections(ds: DetectionSet) -> str:
    b = ds.board
    lines = [DET_HEADER, f"board {b.rows} {b.cols} {_f(b.square_size)}", f"sensor {ds.sensor_size[0]} {ds.sensor_size[1]}"]
    for det in ds.detections:
        lines.append(f"frame {int(det.frame_timestamp)} {_f(det.quality)}")
        lines.extend(f"{_f(u)} {_f(v)}" for u, v in det.image_points)
    lines.append(f"rejects {len(ds.rejects)}")
    lines.extend(f"{int(t)} {reason}" for t, reason in ds.rejects)
    return "\n".join(lines) + "\n"


def write_detections(ds: DetectionSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_detections(ds))


def read_detections(path) -> DetectionSet:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh]
    it = iter(enumerate(lines, start=1))

    def nxt():
        for no, ln in it:
            if ln.strip() and not ln.startswith("#"):
                return no, ln.split()
        return None, None

    no, tok = nxt()
    if tok is None or tok[0] != "board" or len(tok) != 4:
        raise MalformedLine(no or 1, "expected 'board rows cols square_size'")
    board = BoardSpec(int(tok[1]), int(tok[2]), float(tok[3]))
    no, tok = nxt()
    if tok is None or tok[0] != "sensor" or len(tok) != 3:
        raise MalformedLine(no or 2, "expected 'sensor width height'")
    ds = DetectionSet(board, (int(tok[1]), int(tok[2])))
    bp = board.board_points()
    n = board.n_corners
    while True:
        no, tok = nxt()
        if tok is None:
            break
        try:
            if tok[0] == "frame":
                t, q = int(tok[1]), float(tok[2])
                pts = []
                for _ in range(n):
                    no, tk = nxt()
                    if tk is None or len(tk) != 2:
                        raise MalformedLine(no or len(lines), "expected 'u v'")
                    pts.append((float(tk[0]), float(tk[1])))
                ds.detections.append(Detection(t, np.array(pts).reshape(board.rows, board.cols, 2), bp, q))
            elif tok[0] == "rejects":
                for _ in range(int(tok[1])):
                    no, tk = nxt()
                    if tk is None or len(tk) != 2:
                        raise MalformedLine(no or len(lines), "expected 't reason'")
                    ds.rejects.append((int(tk[0]), tk[1]))
            else:
                raise MalformedLine(no, " ".join(tok))
        except (ValueError, IndexError) as exc:
            if isinstance(exc, MalformedLine):
                raise
            raise MalformedLine(no, " ".join(tok)) from exc
    return ds


# --- ground truth ------------------------------------------------------------


@dataclass
class GroundTruth:
    camera: CameraModel
    frames: list[tuple[int, Pose]]
    extrinsic: Pose = field(default_factory=Pose.identity)
    contrast_threshold: float = 0.3


def _pose_tokens(p: Pose) -> str:
    return " ".join(_f(v) for v in (*p.rotation, *p.translation))


def write_ground_truth(gt: GroundTruth, path) -> None:
    c = gt.camera
    lines = [
        GT_HEADER,
        f"model {c.model}",
        f"sensor {c.sensor_size[0]} {c.sensor_size[1]}",
        f"intrinsics {_f(c.fx)} {_f(c.fy)} {_f(c.cx)} {_f(c.cy)}",
        "distortion " + " ".join(_f(v) for v in c.dist),
        f"contrast_threshold {_f(gt.contrast_threshold)}",
        f"extrinsic {_pose_tokens(gt.extrinsic)}",
        f"frames {len(gt.frames)}",
    ]
    lines.extend(f"{int(t)} {_pose_tokens(p)}" for t, p in gt.frames)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ground_truth(path) -> GroundTruth:
    if not os.path.exists(path):
        raise ValidationError(f"ground-truth file {path} not found")
    fields: dict[str, list[str]] = {}
    frames = []
    with open(path, encoding="utf-8") as fh:
        in_frames = False
        for no, ln in enumerate(fh, start=1):
            tok = ln.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if in_frames:
                    if len(tok) != 8:
                        raise MalformedLine(no, ln.strip())
                    v = [float(x) for x in tok[1:]]
                    frames.append((int(tok[0]), Pose(np.array(v[:4]), np.array(v[4:]))))
                elif tok[0] == "frames":
                    in_frames = True
                else:
                    fields[tok[0]] = tok[1:]
            except ValueError as exc:
                raise MalformedLine(no, ln.strip()) from exc
    try:
        model = fields["model"][0]
        sensor = tuple(int(v) for v in fields["sensor"])
        fx, fy, cx, cy = (float(v) for v in fields["intrinsics"])
        dist = np.array([float(v) for v in fields.get("distortion", ["0"] * 4)])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"incomplete ground-truth header in {path}") from exc
    ext = fields.get("extrinsic")
    extrinsic = Pose(np.array([float(v) for v in ext[:4]]), np.array([float(v) for v in ext[4:]])) if ext else Pose.identity()
    C = float(fields.get("contrast_threshold", ["0.3"])[0])
    return GroundTruth(CameraModel(model, fx, fy, cx, cy, dist, sensor), frames, extrinsic, C)


# --- frames --------------------------------------------------------------------


def frame_filename(timestamp: int) -> str:
    return f"frame_{int(timestamp)}.pgm"


def write_frames(frames, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for f in frames:
        p = os.path.join(directory, frame_filename(f.timestamp))
        write_gray(p, f.pixels)
        paths.append(p)
    return paths
