"""
Data models for the CoBra weakly-supervised segmentation pipeline.

Configuration objects are validated pydantic models; tensor-carrying records
wrap torch tensors (batched where they come straight out of a model) and
numpy arrays (images and masks).
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import ConfigError


class BranchMode(str, Enum):
    """Which branches are trained and used for seeds."""

    BOTH = "both"
    CAK = "cak"
    SAK = "sak"


class OptimizerName(str, Enum):
    """Supported optimizers."""

    SGD_MOMENTUM = "sgd-momentum"
    ADAMW = "adamw"


class CamSource(str, Enum):
    """Origin of a class activation stack."""

    CNN = "cnn"
    VIT = "vit"
    FUSED = "fused"


class ProjectionKind(str, Enum):
    """Class-aware (CNN side) or semantic-aware (transformer side) projections."""

    CAP = "cap"
    SAP = "sap"


class MaskSource(str, Enum):
    """Ways of combining the two CAMs into a seed."""

    CNN = "cnn"
    TRAN = "tran"
    AVERAGE = "average"
    MAX = "max"
    FUSE = "fuse"


# ============= CONFIGURATION =============

class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Config):
    """Synthetic shapes dataset parameters."""

    num_classes: int = Field(3, ge=2, description="Number of foreground classes")
    image_size: int = Field(64, ge=8, description="Square image side in pixels")
    samples: int = Field(500, ge=1, description="Number of generated samples")
    shapes_per_image: int = Field(3, ge=1, le=3, description="Maximum shapes per image")
    rng_seed: int = Field(0, description="Generator seed")
    patch_size: int = Field(8, ge=1, description="Patch size the images must be divisible by")


class ModelConfig(_Config):
    """Tiny reference backbones and heads."""

    num_classes: int = Field(3, ge=1)
    image_size: int = Field(64, ge=8, description="Training image side; sets the positional grid")
    patch_size: int = Field(8, ge=1)
    cnn_channels: List[int] = Field(default_factory=lambda: [32, 64, 96, 128])
    cnn_strides: List[int] = Field(default_factory=lambda: [1, 2, 2, 2])
    embed_dim: int = Field(96, ge=4)
    depth: int = Field(4, ge=1)
    num_heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(2.0, gt=0)
    proj_dim: int = Field(256, ge=2, description="CAP/SAP projection size")

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.cnn_channels) != len(self.cnn_strides):
            raise ValueError("cnn_channels and cnn_strides must have the same length")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.cnn_stride != self.patch_size:
            raise ValueError(
                f"CNN total stride {self.cnn_stride} must equal patch size {self.patch_size}"
            )
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        return self

    @property
    def cnn_stride(self) -> int:
        stride = 1
        for s in self.cnn_strides:
            stride *= s
        return stride

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


class SelectionConfig(_Config):
    """Patch counts for the two contrastive selections."""

    k_sap_pos: int = Field(20, ge=1)
    k_sap_neg: int = Field(5, ge=1)
    k_cap_pos: int = Field(5, ge=1)
    k_cap_neg: int = Field(20, ge=1)
    pseudo_bg_thresh: float = Field(0.3, gt=0, lt=1)

    def check_grid(self, num_patches: int) -> None:
        """Raise if the k values cannot be honoured on a grid of ``num_patches``."""
        if self.k_sap_pos + self.k_sap_neg > num_patches:
            raise ConfigError(f"k_sap_pos + k_sap_neg exceeds {num_patches} patches")
        if self.k_cap_pos + self.k_cap_neg > num_patches:
            raise ConfigError(f"k_cap_pos + k_cap_neg exceeds {num_patches} patches")


class LossConfig(_Config):
    """Weights and temperature of the training objective."""

    tau: float = Field(0.1, gt=0)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(0.1, ge=0)
    cam_loss_start_epoch: int = Field(1, ge=0)
    enable_cap: bool = True
    enable_sap: bool = True


class ThresholdConfig(_Config):
    """Trimap thresholds derived from the object attention."""

    bg_weight: float = Field(0.3, ge=0)
    fg_bg_gap: float = Field(0.5, ge=0)
    bg_clip: Tuple[float, float] = (0.05, 0.45)

    @model_validator(mode="after")
    def check_clip(self):
        low, high = self.bg_clip
        if not 0 <= low <= high:
            raise ValueError("bg_clip must satisfy 0 <= low <= high")
        if high + self.fg_bg_gap > 1:
            raise ValueError("bg_clip upper bound plus fg_bg_gap must not exceed 1")
        return self


class InferenceConfig(_Config):
    """Seed generation and seed evaluation settings."""

    scales: List[float] = Field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0])
    source: MaskSource = MaskSource.FUSE
    seed_threshold: float = Field(0.3, gt=0, lt=1, description="Background score for seed mIoU")
    diagnostics_threshold: float = Field(0.5, gt=0, lt=1)

    @field_validator("scales")
    def validate_scales(cls, v):
        if not v or any(s <= 0 for s in v):
            raise ValueError("scales must be a non-empty list of positive numbers")
        return v


class TrainConfig(_Config):
    """Training loop settings."""

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(16, ge=1)
    crop: int = Field(64, ge=1)
    lr: float = Field(3e-4, gt=0)
    optimizer: OptimizerName = OptimizerName.ADAMW
    weight_decay: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    rng_seed: int = 0
    branches: BranchMode = BranchMode.BOTH
    num_workers: int = Field(0, ge=0)
    device: str = Field("cpu", description="torch device for training and inference")
    loss: LossConfig = Field(default_factory=LossConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)


class CobraConfig(_Config):
    """Root configuration mirrored by the JSON config file."""

    data: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    masks: ThresholdConfig = Field(default_factory=ThresholdConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)

    @model_validator(mode="after")
    def check_consistency(self):
        if self.train.crop % self.model.patch_size:
            raise ValueError("train.crop must be divisible by model.patch_size")
        if self.model.num_classes != self.data.num_classes:
            raise ValueError("model.num_classes must equal data.num_classes")
        return self


# ============= DOMAIN RECORDS =============

class _Record(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class Sample(_Record):
    """One image with image-level labels and an optional evaluation mask."""

    id: str
    image: np.ndarray = Field(..., description="H x W x 3 float32 in [0, 1]")
    labels: np.ndarray = Field(..., description="C multi-hot")
    gt_mask: Optional[np.ndarray] = Field(None, description="H x W, 0 = background, k+1 = class k")
    warnings: List[str] = Field(default_factory=list)

    @field_validator("labels")
    def validate_labels(cls, v):
        if v.ndim != 1 or v.sum() < 1:
            raise ValueError("labels must be a multi-hot vector with at least one positive")
        return v

    @property
    def positives(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.labels)]


class FeatureMap(_Record):
    """CNN features, B x D_c x N x N."""

    values: torch.Tensor

    @property
    def grid(self) -> int:
        return int(self.values.shape[-1])


class PatchTokens(_Record):
    """Transformer tokens, B x (1 + gh * gw) x D; row 0 is the class token."""

    values: torch.Tensor
    grid: int
    grid_width: Optional[int] = None

    @property
    def grid_shape(self) -> Tuple[int, int]:
        """(rows, columns) of the patch grid; square unless ``grid_width`` is set."""
        return self.grid, self.grid_width or self.grid


class AttentionStack(_Record):
    """Head-averaged post-softmax attention, B x L x (1 + N^2) x (1 + N^2)."""

    layers: torch.Tensor

    @property
    def num_layers(self) -> int:
        return int(self.layers.shape[1])


class CamStack(_Record):
    """Class activation maps, B x C x N x N."""

    values: torch.Tensor
    source: CamSource


class PseudoLabelGrid(_Record):
    """Per-patch pseudo labels of one image; 0 = background, k+1 = class k."""

    labels: torch.Tensor
    scores: torch.Tensor


class ProjectionSet(_Record):
    """Unit-norm projected patch embeddings, B x N^2 x d."""

    vectors: torch.Tensor
    kind: ProjectionKind


class PatchAffinity(_Record):
    """Layer-averaged patch-to-patch attention, B x N^2 x N^2."""

    values: torch.Tensor


class ObjAttention(_Record):
    """Min-max normalised class-token attention over patches, B x (gh * gw)."""

    values: torch.Tensor
    grid: int
    grid_width: Optional[int] = None

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.grid, self.grid_width or self.grid

    def as_grid(self) -> torch.Tensor:
        return self.values.reshape(self.values.shape[0], *self.grid_shape)


class SelectionSets(BaseModel):
    """Targets with their positive and negative patch indices."""

    targets: List[int] = Field(default_factory=list)
    positives: List[List[int]] = Field(default_factory=list)
    negatives: List[List[int]] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_sets(self):
        if not len(self.targets) == len(self.positives) == len(self.negatives):
            raise ValueError("targets, positives and negatives must align")
        for target, pos, neg in zip(self.targets, self.positives, self.negatives):
            if set(pos) & set(neg):
                raise ValueError(f"positives and negatives overlap for target {target}")
            if target in pos or target in neg:
                raise ValueError(f"target {target} selected for itself")
        return self

    @property
    def is_empty(self) -> bool:
        return not self.targets


class Seed(_Record):
    """Per-class localisation map at image resolution, C x H x W in [0, 1]."""

    id: str
    values: torch.Tensor


class SeedBundle(_Record):
    """Seed variants of one image plus the object attention used for its trimap."""

    id: str
    maps: Dict[MaskSource, torch.Tensor] = Field(..., description="C x H x W per mask source")
    obj: torch.Tensor = Field(..., description="gh x gw object attention at scale 1")
    positives: List[int]

    def seed(self, source: MaskSource = MaskSource.FUSE) -> Seed:
        return Seed(id=self.id, values=self.maps[source])


class TriMap(_Record):
    """H x W labels: 0 background, 255 unknown, k+1 class k."""

    labels: np.ndarray


class LossReport(BaseModel):
    """Scalar values of every loss term for one step."""

    cls: float
    cam: float
    cap: float
    sap: float
    total: float

    def is_consistent(self, cfg: LossConfig, tol: float = 1e-6) -> bool:
        expected = self.cls + cfg.lambda1 * self.cam + cfg.lambda2 * (self.sap + self.cap)
        return abs(expected - self.total) <= tol


class IouResult(BaseModel):
    """Per-class IoU table."""

    class_names: List[str]
    iou: List[Optional[float]]
    miou: float
    evaluated_pixels: int
    ignored_pixels: int

    def as_dict(self) -> Dict[str, Optional[float]]:
        data: Dict[str, Optional[float]] = dict(zip(self.class_names, self.iou))
        data["mIoU"] = self.miou
        return data


class Diagnostics(BaseModel):
    """Macro-averaged class precision and semantic sensitivity."""

    class_precision: float
    semantic_sensitivity: float
