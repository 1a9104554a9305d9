"""trajcast: multi-modal vehicle trajectory forecasting on lane-mapped
scenes, with a recurrent decoder that fuses map and social context at every
rollout step."""

from .features import PreparedScene, SceneBatch, collate, prepare_scene
from .metrics import MetricReport, evaluate_model
from .model import (
    ModelConfig,
    PredictionSet,
    RecurrentForecaster,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .scene import Polyline, Scene, Se2Transform, load_scene, save_scene
from .synthetic import generate_dataset, generate_scene, load_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "MetricReport",
    "Polyline",
    "PredictionSet",
    "PreparedScene",
    "RecurrentForecaster",
    "Scene",
    "SceneBatch",
    "Se2Transform",
    "TrainConfig",
    "collate",
    "evaluate_model",
    "generate_dataset",
    "generate_scene",
    "load_checkpoint",
    "load_dataset",
    "load_scene",
    "predict",
    "prepare_scene",
    "save_checkpoint",
    "save_scene",
    "train",
    "__version__",
]
