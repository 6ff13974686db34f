"""Attachment-structured Bayesian neural networks for OOD-aware uncertainty."""

from .datasets import BlobSpec, DatasetBundle, gen_blobs, load_idx, pseudo_ood
from .estimator import AbnnClassifier
from .evaluation import auroc, aupr, cluster3, detection_accuracy, tnr_at_tpr95, uncertainty_scores
from .model import AbnnModel, ModelConfig, load_checkpoint, predict_mc, save_checkpoint
from .numerics import Rng
from .training import TrainerConfig, train

__version__ = "0.1.0"

__all__ = [
    "AbnnClassifier",
    "AbnnModel",
    "BlobSpec",
    "DatasetBundle",
    "ModelConfig",
    "Rng",
    "TrainerConfig",
    "auroc",
    "aupr",
    "cluster3",
    "detection_accuracy",
    "gen_blobs",
    "load_checkpoint",
    "load_idx",
    "predict_mc",
    "pseudo_ood",
    "save_checkpoint",
    "tnr_at_tpr95",
    "train",
    "uncertainty_scores",
    "__version__",
]
