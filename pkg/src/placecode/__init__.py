"""Disentangled place/appearance/occlusion representation learning with a
retrieval-based localization pipeline and a synthetic factor-controlled
dataset for desk-scale verification."""

from .geometry import GeometricTransform, Pose6DoF, apply_transform, inverse_transform, pose_error
from .losses import LossReport, LossWeights
from .networks import FactorCodes, FactorModel, ImageBatch, build_model
from .training import TrainConfig, TrainState, create_train_state, forward_graph, train_step

__all__ = [
    "GeometricTransform",
    "Pose6DoF",
    "apply_transform",
    "inverse_transform",
    "pose_error",
    "LossReport",
    "LossWeights",
    "FactorCodes",
    "FactorModel",
    "ImageBatch",
    "build_model",
    "TrainConfig",
    "TrainState",
    "create_train_state",
    "forward_graph",
    "train_step",
]
