"""Tracking a magnetised pencil tip over a touchscreen from magnetometer readings."""

from .geometry import AttitudeAngles, PencilPose, Quaternion, RotationAxes, ScreenConfig
from .logs import ImuLog, MagLog, PoseLog, Session, TouchLog, Trace
from .magmap import ScreenMap2D, VoxelField, build_2d_map, build_pencil_map, reconstruct
from .tracker import TrackerConfig, track_stroke, track_stroke_2d

__version__ = "0.1.0"

__all__ = [
    "AttitudeAngles",
    "ImuLog",
    "MagLog",
    "PencilPose",
    "PoseLog",
    "Quaternion",
    "RotationAxes",
    "ScreenConfig",
    "ScreenMap2D",
    "Session",
    "TouchLog",
    "Trace",
    "TrackerConfig",
    "VoxelField",
    "build_2d_map",
    "build_pencil_map",
    "reconstruct",
    "track_stroke",
    "track_stroke_2d",
    "__version__",
]
