"""Pose-augmented anchor-free behavior detector.

Dense multi-level detection of three behavior classes (fight, tumble,
squat) with stacked-hourglass keypoint supervision, plus the full
support stack: annotation ingest, target assignment, losses, decoding,
mAP evaluation, a synthetic corpus generator, and a training/eval CLI.
"""

__version__ = "0.1.0"

from .ingest import BoxAnnotation, ImageSample, KeypointSet  # noqa: F401
from .network import BackboneConfig, NetworkOutputs, PoseDet  # noqa: F401
from .postprocess import Detection  # noqa: F401
