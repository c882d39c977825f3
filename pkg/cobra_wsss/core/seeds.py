"""
Seed generation and mask generation.

A seed is a per-class localisation map at image resolution. Seeds are built
from both branches at several input scales; masks are trimaps thresholded
with a background level derived from the object attention.
"""

import logging
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbones import scaled_size
from .branches import CobraModel, minmax_normalize, vit_localization
from .exceptions import ConfigError, CrfError, DatasetError, ShapeError
from .models import CamSource, CamStack, MaskSource, ObjAttention, Seed, SeedBundle, ThresholdConfig, TriMap
from .storage import TensorStore

logger = logging.getLogger(__name__)

UNKNOWN = 255
CRF_ENV = "COBRA_CRF_CMD"


# ============= FUSION =============

def normalize_cams(cams: torch.Tensor) -> torch.Tensor:
    """Per-class min-max normalisation over the two spatial axes; constant maps become 0."""
    return minmax_normalize(cams, dims=(-2, -1))


def combine_sources(m_cnn: torch.Tensor, m_tran: torch.Tensor, source: MaskSource) -> torch.Tensor:
    """
    Combine two normalised class maps.

    Args:
        m_cnn, m_tran: same-shape maps in [0, 1]
        source: which combination to return

    Returns:
        cnn, tran, their average, their elementwise max, or max(average, tran)
    """
    if m_cnn.shape != m_tran.shape:
        raise ShapeError(f"CAM shapes differ: {tuple(m_cnn.shape)} vs {tuple(m_tran.shape)}")
    if source == MaskSource.CNN:
        return m_cnn
    if source == MaskSource.TRAN:
        return m_tran
    average = (m_cnn + m_tran) / 2
    if source == MaskSource.AVERAGE:
        return average
    if source == MaskSource.MAX:
        return torch.maximum(m_cnn, m_tran)
    return torch.maximum(average, m_tran)


def fuse_cams(m_cnn: CamStack, m_tran: CamStack) -> CamStack:
    """Fusion CAM max((M_cnn + M_tran) / 2, M_tran) of normalised stacks."""
    values = combine_sources(m_cnn.values, m_tran.values, MaskSource.FUSE)
    return CamStack(values=values, source=CamSource.FUSED)


def upsample(maps: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of C x h x w maps to C x H x W."""
    return F.interpolate(maps.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]


# ============= MULTI-SCALE SEEDS =============

def _positive_mask(num_classes: int, positives: Optional[Sequence[int]], like: torch.Tensor) -> torch.Tensor:
    mask = torch.zeros(num_classes, 1, 1, dtype=like.dtype, device=like.device)
    if positives is None:
        mask[:] = 1
    else:
        mask[list(positives)] = 1
    return mask


def _pair(size: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    return (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))


@torch.no_grad()
def scale_maps(
    model: CobraModel, image: torch.Tensor, size: Union[int, Tuple[int, int]]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Rectified, normalised CNN and transformer CAMs of one image resized to ``size``.

    Negative class evidence is clipped to zero before the per-class min-max
    normalisation. The transformer CAMs are modulated by the object attention. A branch the
    model does not use yields zeros; the object attention is all ones when
    the transformer branch is off.

    Args:
        model: dual-branch model in eval mode
        image: 3 x H x W
        size: input side, or (height, width), in multiples of the patch size

    Returns:
        (m_cnn, m_tran, obj) with shapes C x gh x gw, C x gh x gw, gh x gw
    """
    height, width = _pair(size)
    batch = F.interpolate(image.unsqueeze(0), size=(height, width), mode="bilinear", align_corners=False)
    out = model(batch)
    grid = (height // model.cfg.patch_size, width // model.cfg.patch_size)
    classes = model.cfg.num_classes
    m_cnn = m_tran = None
    obj = torch.ones(*grid, dtype=batch.dtype, device=batch.device)
    if out.cak is not None:
        m_cnn = normalize_cams(F.relu(out.cak.cams.values[0]))
    if out.sak is not None:
        m_tran = normalize_cams(F.relu(vit_localization(out.sak.cams, out.sak.obj).values[0]))
        obj = out.sak.obj.as_grid()[0]
    zeros = torch.zeros(classes, *grid, dtype=batch.dtype, device=batch.device)
    return (m_cnn if m_cnn is not None else zeros), (m_tran if m_tran is not None else zeros), obj


def _single_scale_sources(model: CobraModel, m_cnn: torch.Tensor, m_tran: torch.Tensor) -> Dict[MaskSource, torch.Tensor]:
    if not model.uses_sak:
        return {s: (torch.zeros_like(m_cnn) if s == MaskSource.TRAN else m_cnn) for s in MaskSource}
    if not model.uses_cak:
        return {s: (torch.zeros_like(m_tran) if s == MaskSource.CNN else m_tran) for s in MaskSource}
    return {s: combine_sources(m_cnn, m_tran, s) for s in MaskSource}


def scaled_shape(height: int, width: int, scale: float, patch: int) -> Tuple[int, int]:
    """Each side scaled and rounded to a patch multiple on its own."""
    return scaled_size(height, scale, patch), scaled_size(width, scale, patch)


@torch.no_grad()
def multiscale_maps(
    model: CobraModel,
    image: torch.Tensor,
    scales: Sequence[float],
    positives: Optional[Sequence[int]] = None,
) -> Tuple[Dict[MaskSource, torch.Tensor], torch.Tensor]:
    """
    Every mask source summed over scales and normalised per class.

    Images need not be square: every side is scaled separately and the
    transformer runs on a gh x gw token grid.

    Args:
        model: dual-branch model
        image: 3 x H x W float tensor
        scales: input scale factors; each scaled side is rounded to a patch multiple
        positives: classes to keep; the other class maps are zeroed

    Returns:
        (maps per source, each C x H x W in [0, 1]; object attention at scale 1, gh x gw)
    """
    if not scales:
        raise ValueError("at least one scale is required")
    model.eval()
    height, width = image.shape[-2:]
    patch = model.cfg.patch_size
    native = scaled_shape(height, width, 1.0, patch)

    sums: Dict[MaskSource, torch.Tensor] = {}
    obj: Optional[torch.Tensor] = None
    for scale in scales:
        size = scaled_shape(height, width, scale, patch)
        m_cnn, m_tran, scale_obj = scale_maps(model, image, size)
        if obj is None and size == native:
            obj = scale_obj
        for source, maps in _single_scale_sources(model, m_cnn, m_tran).items():
            resized = upsample(maps, (height, width))
            sums[source] = sums[source] + resized if source in sums else resized

    if obj is None:
        _, _, obj = scale_maps(model, image, native)
    mask = _positive_mask(model.cfg.num_classes, positives, image)
    maps = {source: normalize_cams(total) * mask for source, total in sums.items()}
    return maps, obj


def multiscale_seed(
    model: CobraModel,
    image: torch.Tensor,
    scales: Sequence[float],
    sample_id: str = "",
    positives: Optional[Sequence[int]] = None,
    source: MaskSource = MaskSource.FUSE,
) -> Seed:
    """Multi-scale seed of one image from the chosen mask source (fusion by default)."""
    maps, _ = multiscale_maps(model, image, scales, positives)
    return Seed(id=sample_id, values=maps[source])


def multiscale_bundle(
    model: CobraModel,
    image: torch.Tensor,
    scales: Sequence[float],
    sample_id: str,
    positives: Sequence[int],
) -> SeedBundle:
    """All seed variants of one image plus its object attention."""
    maps, obj = multiscale_maps(model, image, scales, positives)
    return SeedBundle(id=sample_id, maps=maps, obj=obj, positives=sorted(int(c) for c in positives))


def save_bundle(bundle: SeedBundle, path: Union[str, Path]) -> None:
    tensors = {source.value: maps.float() for source, maps in bundle.maps.items()}
    tensors["obj"] = bundle.obj.float()
    tensors["positives"] = torch.as_tensor(bundle.positives, dtype=torch.int64)
    TensorStore(path).write(tensors, {"id": bundle.id})


def load_bundle(path: Union[str, Path]) -> SeedBundle:
    tensors, meta = TensorStore(path).read()
    missing = [s.value for s in MaskSource if s.value not in tensors] + [
        name for name in ("obj", "positives") if name not in tensors
    ]
    if missing:
        raise DatasetError(f"seed file {path} lacks tensors: {', '.join(missing)}")
    return SeedBundle(
        id=meta.get("id", Path(path).stem),
        maps={s: tensors[s.value] for s in MaskSource},
        obj=tensors["obj"],
        positives=[int(c) for c in tensors["positives"].tolist()],
    )


# ============= ATTENTION EXPORT =============

ATTENTION_TENSORS = ("attention", "affinity", "obj")


@torch.no_grad()
def attention_record(model: CobraModel, image: torch.Tensor) -> Tuple[Dict[str, torch.Tensor], Tuple[int, int]]:
    """
    Transformer attention of one image at scale 1.

    Returns:
        ({"attention": L x T x T, "affinity": P x P, "obj": P}, (gh, gw)) with
        T = 1 + P tokens and P = gh * gw patches
    """
    if not model.uses_sak:
        raise ConfigError("attention export needs the transformer branch")
    model.eval()
    height, width = image.shape[-2:]
    size = scaled_shape(height, width, 1.0, model.cfg.patch_size)
    batch = F.interpolate(image.unsqueeze(0), size=size, mode="bilinear", align_corners=False)
    out = model.sak(batch)
    tensors = {
        "attention": out.attention.layers[0],
        "affinity": out.affinity.values[0],
        "obj": out.obj.values[0],
    }
    return tensors, out.obj.grid_shape


def save_attention(
    tensors: Dict[str, torch.Tensor], grid: Tuple[int, int], sample_id: str, path: Union[str, Path]
) -> None:
    TensorStore(path).write(
        {name: tensors[name].float() for name in ATTENTION_TENSORS},
        {"id": sample_id, "grid": [int(grid[0]), int(grid[1])]},
    )


def load_attention(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict]:
    tensors, meta = TensorStore(path).read()
    missing = [name for name in ATTENTION_TENSORS if name not in tensors]
    if missing:
        raise DatasetError(f"attention file {path} lacks tensors: {', '.join(missing)}")
    return tensors, meta


# ============= MASKS =============

def _obj_grid(a_obj: Union[ObjAttention, torch.Tensor]) -> torch.Tensor:
    if isinstance(a_obj, ObjAttention):
        return a_obj.as_grid()[0]
    if a_obj.dim() != 2:
        raise ShapeError(f"object attention must be a gh x gw grid, got {tuple(a_obj.shape)}")
    return a_obj


def background_threshold(a_obj: Union[ObjAttention, torch.Tensor], size: Tuple[int, int], cfg: ThresholdConfig) -> float:
    """clip(bg_weight * mean of the upsampled object attention, bg_clip)."""
    obj = upsample(_obj_grid(a_obj).float().unsqueeze(0), size)[0]
    low, high = cfg.bg_clip
    return float(np.clip(cfg.bg_weight * float(obj.mean()), low, high))


def make_trimap(
    seed: Seed,
    a_obj: Union[ObjAttention, torch.Tensor],
    positives: Sequence[int],
    cfg: ThresholdConfig,
) -> TriMap:
    """
    Trimap from a normalised seed.

    Pixels whose best positive-class score reaches ``theta_bg + fg_bg_gap``
    take that class, scores below ``theta_bg`` are background, the band in
    between is unknown.
    """
    if not positives:
        raise ValueError("a trimap needs at least one positive class")
    values = seed.values.detach().float().cpu()
    theta_bg = background_threshold(a_obj, tuple(values.shape[-2:]), cfg)
    theta_fg = theta_bg + cfg.fg_bg_gap

    classes = torch.as_tensor(sorted(positives), dtype=torch.long)
    score, index = values[classes].max(dim=0)
    labels = np.full(score.shape, UNKNOWN, dtype=np.uint8)
    score_np = score.numpy()
    labels[score_np < theta_bg] = 0
    foreground = score_np >= theta_fg
    labels[foreground] = (classes[index] + 1).numpy().astype(np.uint8)[foreground]
    logger.debug("trimap %s: theta_bg=%.4f theta_fg=%.4f", seed.id, theta_bg, theta_fg)
    return TriMap(labels=labels)


def seed_to_label(seed: Seed, positives: Sequence[int], threshold: float) -> np.ndarray:
    """Dense label map: best positive class + 1, or 0 where its score is below ``threshold``."""
    values = seed.values.detach().float().cpu()
    classes = torch.as_tensor(sorted(positives), dtype=torch.long)
    score, index = values[classes].max(dim=0)
    labels = torch.where(score >= threshold, classes[index] + 1, torch.zeros_like(index))
    return labels.numpy().astype(np.uint8)


def voc_palette() -> List[int]:
    """Bit-interleaved VOC colour map; index 255 is the light 'unknown' colour."""
    palette = []
    for index in range(256):
        r = g = b = 0
        c = index
        for shift in range(7, -1, -1):
            r |= ((c >> 0) & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        palette.extend((r, g, b))
    palette[UNKNOWN * 3: UNKNOWN * 3 + 3] = [224, 224, 192]
    return palette


def export_mask(mask: Union[TriMap, np.ndarray], path: Union[str, Path]) -> None:
    """Write labels as a palette-indexed PNG (0 background, 255 unknown)."""
    labels = mask.labels if isinstance(mask, TriMap) else mask
    if labels.ndim != 2:
        raise ShapeError(f"mask must be H x W, got {labels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(np.asarray(labels, dtype=np.uint8))
    image.putpalette(voc_palette())
    image.save(path)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    """Palette or greyscale PNG to an H x W uint8 label array."""
    with Image.open(path) as image:
        if image.mode not in ("P", "L"):
            raise DatasetError(f"{path} is not a palette-indexed mask (mode {image.mode})")
        return np.array(image, dtype=np.uint8)


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write an H x W x 3 float image in [0, 1] as an RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def load_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0


# ============= CRF HOOK =============

def crf_hook(seed: Seed, image: np.ndarray, command: Optional[str] = None) -> Seed:
    """
    Refine a seed with an external CRF command.

    The command (argument, else ``COBRA_CRF_CMD``) is called as
    ``<cmd> <image.png> <seed.cbt> <out.cbt>`` and must write a tensor named
    ``seed`` of the input shape. Without a command the seed is returned as is.

    Raises:
        CrfError: On a non-zero exit or a malformed output file
    """
    command = command or os.environ.get(CRF_ENV)
    if not command:
        return seed

    with tempfile.TemporaryDirectory(prefix="cobra-crf-") as tmp:
        tmp_dir = Path(tmp)
        image_path, seed_path, out_path = tmp_dir / "image.png", tmp_dir / "seed.cbt", tmp_dir / "out.cbt"
        save_image(image, image_path)
        TensorStore(seed_path).write({"seed": seed.values.float()}, {"id": seed.id})
        argv = shlex.split(command) + [str(image_path), str(seed_path), str(out_path)]
        logger.info("running CRF command for %s", seed.id)
        try:
            result = subprocess.run(argv, capture_output=True, text=True)
        except OSError as e:
            raise CrfError(f"cannot run CRF command '{command}': {e}") from e
        if result.returncode != 0:
            raise CrfError(f"CRF command exited with {result.returncode}: {result.stderr.strip()}")
        try:
            tensors, _ = TensorStore(out_path).read()
        except Exception as e:
            raise CrfError(f"CRF command produced no readable output: {e}") from e

    refined = tensors.get("seed")
    if refined is None or tuple(refined.shape) != tuple(seed.values.shape):
        raise CrfError("CRF output must hold a 'seed' tensor with the input shape")
    return Seed(id=seed.id, values=refined.to(seed.values.dtype))
