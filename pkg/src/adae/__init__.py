"""Adversarial dual-autoencoder anomaly detection.

Two convolutional autoencoders train against each other on normal data; at
test time the Euclidean residual between an input and the discriminator's
reconstruction of the generator's reconstruction is its anomaly score.
"""

from .autodiff import Tensor, no_grad
from .model import ArchConfig, Autoencoder, LayerSpec, build_arch
from .scoring import RocCurve, ScoredSample, anomaly_score, anomaly_scores, roc_curve
from .training import BalancerConfig, LossReport, TrainConfig, train

__all__ = [
    "Tensor",
    "no_grad",
    "ArchConfig",
    "Autoencoder",
    "LayerSpec",
    "build_arch",
    "RocCurve",
    "ScoredSample",
    "anomaly_score",
    "anomaly_scores",
    "roc_curve",
    "BalancerConfig",
    "LossReport",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
