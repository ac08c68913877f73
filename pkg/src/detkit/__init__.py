"""Small-object detection toolkit: box losses, attention blocks, fusion necks, evaluation."""

from .losses import LOSS_IDS, Box, LossParams, WiouState, iou, loss_gradient, loss_value
from .metrics import Detection, GroundTruth, map_at, map_range
from .neck import NeckGraphSpec, build_sod_neck, validate_channels

__all__ = [
    "LOSS_IDS",
    "Box",
    "Detection",
    "GroundTruth",
    "LossParams",
    "NeckGraphSpec",
    "WiouState",
    "build_sod_neck",
    "iou",
    "loss_gradient",
    "loss_value",
    "map_at",
    "map_range",
    "validate_channels",
]
__version__ = "0.1.0"
