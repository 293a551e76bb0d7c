"""Cross-consistency training for semi-supervised segmentation, at desk scale."""
from .datasynth import DatasetSpec, generate_dataset, read_manifest
from .model import CCTNet, pixel_shuffle
from .perturb import PerturbationKind, PerturbParams
from .trainer import TrainConfig, train, train_multidomain

__all__ = [
    "CCTNet",
    "DatasetSpec",
    "PerturbParams",
    "PerturbationKind",
    "TrainConfig",
    "generate_dataset",
    "pixel_shuffle",
    "read_manifest",
    "train",
    "train_multidomain",
]
