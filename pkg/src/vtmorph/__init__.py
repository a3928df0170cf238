"""Generative visible/thermal face registration on a small numpy autodiff engine."""
from . import autodiff, data, faces, metrics, networks, nn, spatial, training
from .estimator import EdgeMapTransformer, ThresholdCropper, VistaMorphRegistration
from .training import TrainConfig, TrainState, register_batch, train

__version__ = "0.1.0"

__all__ = [
    "autodiff", "data", "faces", "metrics", "networks", "nn", "spatial", "training",
    "EdgeMapTransformer", "ThresholdCropper", "VistaMorphRegistration",
    "TrainConfig", "TrainState", "register_batch", "train",
]
