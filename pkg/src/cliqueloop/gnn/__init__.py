"""Learned clique edge scoring."""

from .estimator import CliqueEdgeClassifier
from .io import load_model, save_model
from .model import ModelHyper, ModelParams, init_params, model_forward
from .training import (
    TrainConfig,
    bce_loss,
    gradient_check,
    label_edges,
    predict_query_edges,
    select_candidates,
    train,
)

__all__ = [
    "CliqueEdgeClassifier",
    "ModelHyper",
    "ModelParams",
    "TrainConfig",
    "bce_loss",
    "gradient_check",
    "init_params",
    "label_edges",
    "load_model",
    "model_forward",
    "predict_query_edges",
    "save_model",
    "select_candidates",
    "train",
]
