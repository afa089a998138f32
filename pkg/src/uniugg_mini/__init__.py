"""Desk-scale unified spatial understanding and generation on synthetic two-view scenes."""

from .config import RunConfig, default_stage_config, load_config
from .errors import ConfigurationError, GenerationError, NumericError, ValidationError
from .geometry import Intrinsics, Pose, SceneConfig, ScenePair, generate_scene_pair, plucker_raymap, relative_pose
from .models import UniUGGMini, build_model
from .pipeline import Pipeline, evaluate_pairs
from .training import run_stage

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "default_stage_config", "load_config", "ConfigurationError", "GenerationError", "NumericError",
    "ValidationError", "Intrinsics", "Pose", "SceneConfig", "ScenePair", "generate_scene_pair", "plucker_raymap",
    "relative_pose", "UniUGGMini", "build_model", "Pipeline", "evaluate_pairs", "run_stage",
]
