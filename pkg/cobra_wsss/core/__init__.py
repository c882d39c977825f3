"""
Core module containing data models, numerical building blocks and storage.
"""

from .branches import CobraModel
from .metrics import ConfusionMatrix
from .models import CobraConfig, Sample
from .storage import TensorStore

__all__ = ["CobraConfig", "Sample", "CobraModel", "ConfusionMatrix", "TensorStore"]
