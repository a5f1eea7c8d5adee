"""Abnormal-finding retrieval for two-view radiology studies."""

from .model import (Anchor, Candidate, CvseModel, FeatureMap, ModelDims,
                    RetrievalResult, Study, TrainConfig, TrainingData,
                    load_model, retrieve, save_model, train, triplet_loss)
from .numcore import AdamState, Tensor, adam_step, grad_check

__version__ = "0.1.0"

__all__ = [
    "Anchor", "Candidate", "CvseModel", "FeatureMap", "ModelDims",
    "RetrievalResult", "Study", "TrainConfig", "TrainingData",
    "load_model", "retrieve", "save_model", "train", "triplet_loss",
    "AdamState", "Tensor", "adam_step", "grad_check",
    "__version__",
]
