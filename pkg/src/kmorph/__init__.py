"""Depth-image regression of kinematic model parameters with iterative refinement."""

__version__ = "0.1.0"

from .kinematics import Affine3, MorphParams, ParamSchema, compose, extract_params, inverse, load_schema, to_affine
from .pipeline import Dataset, KinematicMorphingNetwork, PipelineConfig, generate_dataset, predict_iterative, train_loop
from .regressor import DepthRegressor, NetworkSpec, NetworkWeights, TrainConfig
from .render import Camera, PointCloud
from .scene import TASK_NAMES, instantiate, load_task

__all__ = [
    "Affine3",
    "Camera",
    "Dataset",
    "DepthRegressor",
    "KinematicMorphingNetwork",
    "MorphParams",
    "NetworkSpec",
    "NetworkWeights",
    "ParamSchema",
    "PipelineConfig",
    "PointCloud",
    "TASK_NAMES",
    "TrainConfig",
    "compose",
    "extract_params",
    "generate_dataset",
    "instantiate",
    "inverse",
    "load_schema",
    "load_task",
    "predict_iterative",
    "to_affine",
    "train_loop",
]
