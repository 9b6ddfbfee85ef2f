"""Multi-instance learning for acoustic scene classification.

A NumPy implementation of a CNN instance generator, optional dilated
multi-temporal-scale block, single- or multi-detector heads and a max
prediction aggregator, trained end to end from bag (clip) labels.
"""
from .data import SyntheticSpec, generate_synthetic, load_dcase_meta, localization_score
from .estimator import MILSceneClassifier
from .frontend import AudioClip, log_mel, read_wav
from .model import VARIANTS, MILNetwork, ModelConfig, Prediction, classify
from .training import Adam, ConfusionMatrix, PlateauScheduler, train, weighted_bce

__version__ = "0.1.0"

__all__ = [
    "Adam", "AudioClip", "ConfusionMatrix", "MILNetwork", "MILSceneClassifier", "ModelConfig",
    "PlateauScheduler", "Prediction", "SyntheticSpec", "VARIANTS", "classify",
    "generate_synthetic", "load_dcase_meta", "localization_score", "log_mel", "read_wav",
    "train", "weighted_bce",
]
