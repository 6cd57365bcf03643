"""Calibration of event cameras from frames reconstructed out of the event stream."""

from .camera import CameraModel
from .events import EventStream, load_events
from .geometry import Pose
from .simulator import BoardSpec

__version__ = "0.1.0"

__all__ = ["BoardSpec", "CameraModel", "EventStream", "Pose", "load_events", "__version__"]
