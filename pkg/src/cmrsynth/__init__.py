"""Labeled 4D cardiac MR synthesis from a parametric phantom and a SPADE generator."""

from .estimator import SpadeSynthesizer
from .inference import SynthesisRequest, SyntheticDataset, export_dataset, load_dataset, synthesize_sequence
from .models import ModelConfig, SpadeGAN
from .phantom import LabelVolume4D, PhantomParams, generate_label_sequence, validate_params
from .preprocessing import DataConfig, TrainingPair, build_training_set
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "DataConfig",
    "LabelVolume4D",
    "ModelConfig",
    "PhantomParams",
    "SpadeGAN",
    "SpadeSynthesizer",
    "SynthesisRequest",
    "SyntheticDataset",
    "TrainConfig",
    "TrainingPair",
    "build_training_set",
    "export_dataset",
    "generate_label_sequence",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "synthesize_sequence",
    "train",
    "validate_params",
]

__version__ = "0.1.0"
