"""Session skip prediction: encoder-decoder model, metric, loss, baseline,
synthetic data generator, training loop and a scikit-learn style estimator."""

from .data import (FeatureSchema, Session, SessionDataset, TrackTable,
                   default_schema, load_sessions, load_tracks)
from .errors import SkipnetError
from .estimator import SkipPredictor
from .metrics import (EvalReport, average_accuracy, baseline_predict,
                      mean_average_accuracy, position_weights, weighted_log_loss)
from .model import ModelConfig, ModelParams, config_for_schema, forward, init_model_params, predict
from .synthgen import GenConfig, calibrate, generate_dataset
from .train import TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "FeatureSchema", "GenConfig", "ModelConfig", "ModelParams",
    "Session", "SessionDataset", "SkipPredictor", "SkipnetError", "TrackTable",
    "TrainConfig", "average_accuracy", "baseline_predict", "calibrate",
    "config_for_schema", "default_schema", "evaluate", "forward",
    "generate_dataset", "init_model_params", "load_sessions", "load_tracks",
    "mean_average_accuracy", "position_weights", "predict", "weighted_log_loss",
]
