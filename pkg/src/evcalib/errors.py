"""Exception hierarchy shared by all pipeline stages."""


class EvCalibError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EvCalibError, ValueError):
    """Invalid input or configuration, detected before any work is done."""


# --- event I/O -------------------------------------------------------------


class MalformedLine(ValidationError):
    def __init__(self, line_no: int, text: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed event line {line_no}: {text!r}")


class OutOfBounds(ValidationError):
    def __init__(self, index: int, x: int, y: int, sensor_size):
        self.index = index
        super().__init__(
            f"event {index} at ({x}, {y}) outside sensor {sensor_size[0]}x{sensor_size[1]}"
        )


class BadMagic(ValidationError):
    pass


class TruncatedRecord(ValidationError):
    def __init__(self, offset: int):
        self.offset = offset
        super().__init__(f"truncated event record at byte offset {offset}")


class ZeroWindow(ValidationError):
    def __init__(self, window_us):
        super().__init__(f"window must be positive, got {window_us}")


# --- simulator ---------------------------------------------------------------


class DegeneratePose(EvCalibError):
    def __init__(self, message: str = "degenerate board pose", timestamp=None):
        self.timestamp = timestamp
        if timestamp is not None:
            message = f"{message} (t={timestamp} us)"
        super().__init__(message)


class OutOfRange(ValidationError):
    pass


# --- recon -------------------------------------------------------------------


class MixedResolutions(ValidationError):
    pass


class CountMismatch(ValidationError):
    pass


class UnreadableImage(EvCalibError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"cannot read image {path}")


# --- detection ---------------------------------------------------------------


class NotFound(EvCalibError):
    """No complete checkerboard in the frame.

    ``reason`` is one of ``too_few_candidates``, ``grid_incomplete``,
    ``ambiguous_orientation`` or ``saddle_rejected``.
    """

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


# --- calibration -------------------------------------------------------------


class BehindCamera(EvCalibError):
    pass


class NoConvergence(EvCalibError):
    pass


class DegenerateConfiguration(EvCalibError):
    pass


class IllConditioned(EvCalibError):
    pass


class RankDeficient(EvCalibError):
    pass


class NotConverged(EvCalibError):
    """Raised only when the caller asks for strict convergence; carries the best iterate."""

    def __init__(self, result):
        self.result = result
        super().__init__("Levenberg-Marquardt did not converge")


class NoCovisibility(EvCalibError):
    pass


class MissingPose(EvCalibError):
    def __init__(self, view):
        self.view = view
        super().__init__(f"no pose for view {view}")


class ModelMismatch(ValidationError):
    pass


class StageError(EvCalibError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
