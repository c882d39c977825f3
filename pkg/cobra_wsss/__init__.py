"""
CoBra WSSS

Dual-branch weakly-supervised semantic segmentation at desk scale: a
class-aware convolutional branch and a semantic-aware patch-attention branch
trained with cross-branch contrastive losses, producing fused seeds, trimap
masks and mIoU evaluations.
"""

__version__ = "1.0.0"

from .core.models import CobraConfig, Sample, Seed, SeedBundle, TriMap
from .services.dataset_service import DatasetService
from .services.training_service import TrainingService

__all__ = [
    "CobraConfig",
    "Sample",
    "Seed",
    "SeedBundle",
    "TriMap",
    "DatasetService",
    "TrainingService",
]
