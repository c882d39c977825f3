"""
Backbone contracts and tiny trainable reference implementations.

``TinyConvNet`` maps an image to a stride-8 feature map; ``TinyViT`` maps it
to patch tokens (class token first) and exposes the head-averaged attention
of every layer.
"""

import math
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ShapeError
from .models import AttentionStack, FeatureMap, ModelConfig, PatchTokens


def check_divisible(height: int, width: int, multiple: int, what: str) -> None:
    """Raise ``ShapeError`` unless both sides are multiples of ``multiple``."""
    if height % multiple or width % multiple:
        raise ShapeError(f"image size {height}x{width} is not divisible by the {what} {multiple}")


def scaled_size(size: int, scale: float, multiple: int) -> int:
    """Nearest multiple of ``multiple`` to ``size * scale`` (at least one multiple)."""
    return max(multiple, int(round(size * scale / multiple)) * multiple)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(D)) over the last axis."""
    scale = q.shape[-1] ** -0.5
    return (q @ k.transpose(-2, -1) * scale).softmax(dim=-1)


# ============= CONVOLUTIONAL BACKBONE =============

class ConvBlock(nn.Module):
    """A strided 3x3 convolution followed by a 1x1 channel mixer.

    Four blocks keep the receptive field near 17 px at stride 8, so CNN
    activations stay on the discriminative part of an object.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        groups = min(8, out_channels)
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(groups, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 1, bias=False),
            nn.GroupNorm(groups, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class TinyConvNet(nn.Module):
    """Four conv blocks with total stride 8."""

    def __init__(self, channels: List[int], strides: List[int]):
        super().__init__()
        blocks = []
        in_channels = 3
        for out_channels, stride in zip(channels, strides):
            blocks.append(ConvBlock(in_channels, out_channels, stride))
            in_channels = out_channels
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = in_channels
        self.stride = math.prod(strides)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "TinyConvNet":
        return cls(cfg.cnn_channels, cfg.cnn_strides)

    def forward(self, images: torch.Tensor) -> FeatureMap:
        """
        Args:
            images: B x 3 x H x W

        Returns:
            FeatureMap with values B x D_c x H/stride x W/stride
        """
        check_divisible(images.shape[-2], images.shape[-1], self.stride, "CNN stride")
        return FeatureMap(values=self.blocks(images))


# ============= PATCH-TOKEN ATTENTION ENCODER =============

class SelfAttention(nn.Module):
    """Multi-head self-attention that also returns the head-averaged attention."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, tokens, dim = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each B x heads x T x head_dim
        attn = attention_weights(q, k)
        out = (attn @ v).transpose(1, 2).reshape(batch, tokens, dim)
        return self.proj(out), attn.mean(dim=1)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out, attn = self.attn(self.norm1(x))
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TinyViT(nn.Module):
    """Patch embedding, class token, learned positions and a stack of encoder layers."""

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        embed_dim: int,
        depth: int,
        num_heads: int,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.patch_size = patch_size
        self.base_grid = image_size // patch_size
        self.embed_dim = embed_dim
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.base_grid ** 2, embed_dim))
        self.layers = nn.ModuleList(
            [EncoderLayer(embed_dim, num_heads, mlp_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(embed_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "TinyViT":
        return cls(cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads, cfg.mlp_ratio)

    def _positions(self, rows: int, cols: int) -> torch.Tensor:
        if rows == cols == self.base_grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        patch_pos = patch_pos.reshape(1, self.base_grid, self.base_grid, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(rows, cols), mode="bilinear", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, rows * cols, -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward(self, images: torch.Tensor) -> Tuple[PatchTokens, AttentionStack]:
        """
        Args:
            images: B x 3 x H x W, both sides multiples of the patch size

        Returns:
            Tokens B x (1 + gh * gw) x D and the per-layer attention
            B x L x (1 + gh * gw) x (1 + gh * gw), with gh = H / patch and gw = W / patch
        """
        check_divisible(images.shape[-2], images.shape[-1], self.patch_size, "patch size")
        patches = self.patch_embed(images)
        rows, cols = patches.shape[-2:]
        x = patches.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self._positions(rows, cols)

        attentions = []
        for layer in self.layers:
            x, attn = layer(x)
            attentions.append(attn)
        tokens = PatchTokens(values=self.norm(x), grid=rows, grid_width=None if rows == cols else cols)
        return tokens, AttentionStack(layers=torch.stack(attentions, dim=1))
