"""Triplet-regularized VQ autoencoder for unsupervised anomaly detection in retinal OCT B-scans."""

from .data import BScanImage, DatasetIndex, generate_synthetic_dataset, load_dataset
from .model import ModelConfig, VQModel
from .train import Trainer, TrainConfig, fit, load_model

__version__ = "0.1.0"

__all__ = ["BScanImage", "DatasetIndex", "generate_synthetic_dataset", "load_dataset", "ModelConfig", "VQModel",
           "Trainer", "TrainConfig", "fit", "load_model", "__version__"]
