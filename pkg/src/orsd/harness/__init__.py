"""Scaffolding around the core library: synthetic scenes, a toy detector,
training, AP50 evaluation, file formats, and the command-line interface."""

from .config import RunConfig
from .detector import ModelConfig, ToyDetector, init_params, toy_backbone
from .evalap import ap50, evaluate_model
from .scenes import (
    DEFAULT_PALETTE,
    SceneSpec,
    SyntheticScene,
    build_oracle_similarities,
    crop_similarity,
    generate_scene,
    grid_centers,
    make_scene_set,
    make_toy_dictionary,
    palette,
    toy_category_tree,
    toy_projector,
)
from .training import TrainResult, default_scenes, train_toy

__all__ = [
    "DEFAULT_PALETTE",
    "ModelConfig",
    "RunConfig",
    "SceneSpec",
    "SyntheticScene",
    "ToyDetector",
    "TrainResult",
    "ap50",
    "build_oracle_similarities",
    "crop_similarity",
    "default_scenes",
    "evaluate_model",
    "generate_scene",
    "grid_centers",
    "init_params",
    "make_scene_set",
    "make_toy_dictionary",
    "palette",
    "toy_backbone",
    "toy_category_tree",
    "toy_projector",
    "train_toy",
]
