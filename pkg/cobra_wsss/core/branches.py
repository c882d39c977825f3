"""
Class-aware (CNN) and semantic-aware (transformer) branch heads.

The CAK branch produces CNN CAMs, image-level scores, pseudo labels and
class-aware projections; the SAK branch produces transformer CAMs,
semantic-aware projections, the patch affinity and the object attention.
"""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from .backbones import TinyConvNet, TinyViT
from .exceptions import ShapeError
from .models import (
    AttentionStack,
    BranchMode,
    CamSource,
    CamStack,
    FeatureMap,
    ModelConfig,
    ObjAttention,
    PatchAffinity,
    PatchTokens,
    ProjectionKind,
    ProjectionSet,
    PseudoLabelGrid,
)


def minmax_normalize(x: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    """Min-max normalise over ``dims``; slices with no spread become zeros."""
    low = x.amin(dim=tuple(dims), keepdim=True)
    high = x.amax(dim=tuple(dims), keepdim=True)
    spread = high - low
    safe = torch.where(spread > 0, spread, torch.ones_like(spread))
    return torch.where(spread > 0, (x - low) / safe, torch.zeros_like(x))


# ============= CAK BRANCH =============

class CamHead(nn.Module):
    """1x1 classifier over feature channels."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Conv2d(in_channels, num_classes, 1)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, features: FeatureMap) -> CamStack:
        return CamStack(values=self.classifier(features.values), source=CamSource.CNN)


def gap_scores(cams: CamStack) -> torch.Tensor:
    """Global average pooled class scores, B x C."""
    return cams.values.mean(dim=(-2, -1))


def pseudo_labels(cams: torch.Tensor, positives: Sequence[int], bg_thresh: float) -> PseudoLabelGrid:
    """
    Per-patch pseudo labels for one image.

    Args:
        cams: C x N x N class maps
        positives: image-level positive classes (0-based)
        bg_thresh: minimum normalised score for a foreground label

    Returns:
        PseudoLabelGrid with labels in {0} U {c + 1 : c in positives}
    """
    if not positives:
        raise ValueError("pseudo labels need at least one positive class")
    if not 0 < bg_thresh < 1:
        raise ValueError("bg_thresh must lie in (0, 1)")
    classes = torch.as_tensor(sorted(positives), dtype=torch.long, device=cams.device)
    normalized = minmax_normalize(cams[classes], dims=(-2, -1))
    scores, index = normalized.max(dim=0)
    labels = torch.where(scores >= bg_thresh, classes[index] + 1, torch.zeros_like(index))
    return PseudoLabelGrid(labels=labels, scores=scores)


class ProjectionHead(nn.Module):
    """Linear per-patch projection followed by L2 normalisation."""

    def __init__(self, in_dim: int, out_dim: int, kind: ProjectionKind):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.kind = kind

    def raw(self, patches: torch.Tensor) -> torch.Tensor:
        """Un-normalised projection of B x M x D patch vectors."""
        return self.linear(patches)

    def forward(self, patches: torch.Tensor) -> ProjectionSet:
        return ProjectionSet(vectors=F.normalize(self.raw(patches), dim=-1), kind=self.kind)


def feature_patches(features: FeatureMap) -> torch.Tensor:
    """B x D x N x N feature map as B x N^2 x D patch vectors (row-major)."""
    return features.values.flatten(2).transpose(1, 2)


class CakOutput(BaseModel):
    """Everything the CAK branch produces for a batch."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: FeatureMap
    cams: CamStack
    scores: torch.Tensor
    cap: ProjectionSet


class CakBranch(nn.Module):
    """CNN backbone with CAM head and class-aware projection head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = TinyConvNet.from_config(cfg)
        self.cam_head = CamHead(self.backbone.out_channels, cfg.num_classes)
        self.projection = ProjectionHead(self.backbone.out_channels, cfg.proj_dim, ProjectionKind.CAP)

    def cap_project(self, features: FeatureMap) -> ProjectionSet:
        return self.projection(feature_patches(features))

    def forward(self, images: torch.Tensor) -> CakOutput:
        features = self.backbone(images)
        cams = self.cam_head(features)
        return CakOutput(
            features=features,
            cams=cams,
            scores=gap_scores(cams),
            cap=self.cap_project(features),
        )


# ============= SAK BRANCH =============

class VitCamHead(nn.Module):
    """Per-patch linear classifier over the non-class tokens."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Linear(embed_dim, num_classes)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, tokens: PatchTokens) -> CamStack:
        patches = tokens.values[:, 1:]
        logits = self.classifier(patches)  # B x (gh * gw) x C
        batch, _, classes = logits.shape
        values = logits.transpose(1, 2).reshape(batch, classes, *tokens.grid_shape)
        return CamStack(values=values, source=CamSource.VIT)


def patch_affinity(attention: AttentionStack) -> PatchAffinity:
    """Mean over layers of the patch-to-patch attention submatrix."""
    if attention.num_layers < 1:
        raise ShapeError("patch affinity needs at least one attention layer")
    return PatchAffinity(values=attention.layers[:, :, 1:, 1:].mean(dim=1))


def object_attention(attention: AttentionStack, grid_shape: Optional[Tuple[int, int]] = None) -> ObjAttention:
    """
    Class-token attention to every patch, layer-averaged and min-max normalised.

    ``grid_shape`` defaults to the square grid implied by the token count.
    """
    if attention.num_layers < 1:
        raise ShapeError("object attention needs at least one attention layer")
    row = attention.layers[:, :, 0, 1:].mean(dim=1)
    if grid_shape is None:
        side = int(round(row.shape[-1] ** 0.5))
        grid_shape = (side, side)
    rows, cols = grid_shape
    if rows * cols != row.shape[-1]:
        raise ShapeError(f"grid {rows}x{cols} does not hold {row.shape[-1]} patches")
    return ObjAttention(
        values=minmax_normalize(row, dims=(-1,)), grid=rows, grid_width=None if rows == cols else cols
    )


def vit_localization(m_tran: CamStack, a_obj: ObjAttention) -> CamStack:
    """Modulate every class map by the object attention (element-wise product)."""
    cam_grid = tuple(m_tran.values.shape[-2:])
    if cam_grid != a_obj.grid_shape:
        raise ShapeError(f"CAM grid {cam_grid} does not match attention grid {a_obj.grid_shape}")
    return CamStack(values=m_tran.values * a_obj.as_grid().unsqueeze(1), source=m_tran.source)


class SakOutput(BaseModel):
    """Everything the SAK branch produces for a batch."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: PatchTokens
    attention: AttentionStack
    cams: CamStack
    scores: torch.Tensor
    token_scores: torch.Tensor
    sap: ProjectionSet
    affinity: PatchAffinity
    obj: ObjAttention


class SakBranch(nn.Module):
    """Patch-attention encoder with CAM head and semantic-aware projection head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = TinyViT.from_config(cfg)
        self.cam_head = VitCamHead(cfg.embed_dim, cfg.num_classes)
        # classifies the class token so its attention is trained to find objects
        self.token_head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.projection = ProjectionHead(cfg.embed_dim, cfg.proj_dim, ProjectionKind.SAP)

    def sap_project(self, tokens: PatchTokens) -> ProjectionSet:
        return self.projection(tokens.values[:, 1:])

    def forward(self, images: torch.Tensor) -> SakOutput:
        tokens, attention = self.backbone(images)
        cams = self.cam_head(tokens)
        return SakOutput(
            tokens=tokens,
            attention=attention,
            cams=cams,
            scores=gap_scores(cams),
            token_scores=self.token_head(tokens.values[:, 0]),
            sap=self.sap_project(tokens),
            affinity=patch_affinity(attention),
            obj=object_attention(attention, tokens.grid_shape),
        )


# ============= DUAL-BRANCH MODEL =============

class CobraOutput(BaseModel):
    """Outputs of whichever branches are active."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    cak: Optional[CakOutput] = None
    sak: Optional[SakOutput] = None


class CobraModel(nn.Module):
    """Both branches over the same input image."""

    def __init__(self, cfg: ModelConfig, mode: BranchMode = BranchMode.BOTH):
        super().__init__()
        self.cfg = cfg
        self.mode = mode
        self.cak = CakBranch(cfg)
        self.sak = SakBranch(cfg)

    @property
    def uses_cak(self) -> bool:
        return self.mode in (BranchMode.BOTH, BranchMode.CAK)

    @property
    def uses_sak(self) -> bool:
        return self.mode in (BranchMode.BOTH, BranchMode.SAK)

    def forward(self, images: torch.Tensor) -> CobraOutput:
        return CobraOutput(
            cak=self.cak(images) if self.uses_cak else None,
            sak=self.sak(images) if self.uses_sak else None,
        )
