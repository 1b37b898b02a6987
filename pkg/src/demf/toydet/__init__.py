"""Synthetic multi-modal scenes, toy encoders and the training loop."""

from .encoders import ImageEncoder, PointEncoder, farthest_point_sample, local_stats
from .scene import SceneSpec, SpecInvalid, ToyScene, synth_scene
from .train import (
    ConfigInvalid,
    NonFiniteLoss,
    ToyDetector,
    TrainConfig,
    build,
    evaluate,
    format_metrics,
    train,
)
