"""Adversarial-example detection for small vision transformers.

Train a classifier that exposes its attention internals, train a masked
autoencoder on the same clean data, and flag inputs whose attention
rollout or CLS representation moves too far when the autoencoder
reconstructs them. Includes the attack suite used to evaluate the
detectors (FGSM/PGD/APGD/CW, attention-aware patch attacks, transfer,
and a detection-aware CW variant).
"""

from .errors import (ConfigurationError, DimensionError, EvaluationError,
                     InputError, StateError, VitsentryError)
from .mae import MAEConfig, MaskedAutoencoder, full_recover, reconstruct, sample_mask, train_mae
from .rollout import cls_attention, rollout_all
from .vit import ModelConfig, TrainSpec, TransformerTrace, VitClassifier, train_classifier

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DimensionError", "EvaluationError", "InputError",
    "StateError", "VitsentryError",
    "MAEConfig", "MaskedAutoencoder", "full_recover", "reconstruct",
    "sample_mask", "train_mae",
    "cls_attention", "rollout_all",
    "ModelConfig", "TrainSpec", "TransformerTrace", "VitClassifier",
    "train_classifier",
    "__version__",
]
