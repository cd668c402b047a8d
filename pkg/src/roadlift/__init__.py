"""Lift 2D vehicle keypoint descriptors to 3D boxes using a triangulated road map."""

from .geometry import Box2D, Box3D, CameraModel
from .lifting import LiftResult, fallback_lift, lift
from .metrics import MatchConfig, average_precision, iou_3d, iou_bev
from .tin import ElevationOnly, Nominal, TinMap, VertexPerturbed, build_tin

__version__ = "0.1.0"

__all__ = [
    "Box2D",
    "Box3D",
    "CameraModel",
    "ElevationOnly",
    "LiftResult",
    "MatchConfig",
    "Nominal",
    "TinMap",
    "VertexPerturbed",
    "average_precision",
    "build_tin",
    "fallback_lift",
    "iou_3d",
    "iou_bev",
    "lift",
]
