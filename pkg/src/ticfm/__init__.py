"""Train-free in-context classification of univariate time series."""

from .config import ModelConfig, ModelParams, init_params
from .errors import (
    ContractError,
    DegenerateTaskError,
    IntegrityError,
    InvalidRunError,
    NonFiniteError,
    ParseError,
    ProtocolError,
    ShapeError,
    TicfmError,
)
from .estimator import TICFMClassifier, TICFMEmbedder
from .evaluation import BaselineClassifier, LabeledDataset, evaluate, load_dataset, stratified_split
from .inference import EnsembleConfig, ensemble_predict, fit_class_tree, hierarchical_predict
from .model_io import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BaselineClassifier",
    "ContractError",
    "DegenerateTaskError",
    "EnsembleConfig",
    "IntegrityError",
    "InvalidRunError",
    "LabeledDataset",
    "ModelConfig",
    "ModelParams",
    "NonFiniteError",
    "ParseError",
    "ProtocolError",
    "ShapeError",
    "TICFMClassifier",
    "TICFMEmbedder",
    "TicfmError",
    "ensemble_predict",
    "evaluate",
    "fit_class_tree",
    "hierarchical_predict",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "stratified_split",
]
