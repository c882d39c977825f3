"""
Services module orchestrating datasets, training, seeds, masks, evaluation and reports.
"""

from .ablation_service import AblationService
from .dataset_service import DatasetService
from .evaluation_service import EvaluationService
from .mask_service import MaskService
from .report_service import ReportService
from .training_service import TrainingService

__all__ = [
    "AblationService",
    "DatasetService",
    "EvaluationService",
    "MaskService",
    "ReportService",
    "TrainingService",
]
