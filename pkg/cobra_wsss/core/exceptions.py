"""
Exception hierarchy for the CoBra pipeline.
"""

from typing import List, Optional


class CobraError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigError(CobraError):
    """Invalid configuration file, override or environment value."""


class ShapeError(CobraError, ValueError):
    """Tensor or image size violates a shape contract."""


class DatasetError(CobraError):
    """Dataset directory cannot be loaded."""


class SampleError(DatasetError):
    """A single sample is unusable."""

    def __init__(self, sample_id: str, message: str):
        self.sample_id = sample_id
        super().__init__(f"sample '{sample_id}': {message}")


class StorageError(CobraError):
    """Tensor container cannot be written or parsed."""


class CheckpointError(StorageError):
    """Checkpoint does not match the configured model."""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        self.tensor_name = tensor_name
        super().__init__(message)


class TrainingError(CobraError):
    """Training aborted (non-finite loss)."""

    def __init__(self, message: str, batch_ids: Optional[List[str]] = None, dump_path: Optional[str] = None):
        self.batch_ids = batch_ids or []
        self.dump_path = dump_path
        super().__init__(message)


class CrfError(CobraError):
    """External CRF command failed."""


class OverrideError(ConfigError):
    """A ``key=value`` override is malformed or names an unknown key."""
