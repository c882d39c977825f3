"""
Dataset service: synthetic generation, on-disk layout and loading.

Directory layout::

    images/<id>.png     RGB images
    masks/<id>.png      optional palette masks, 0 = background, k+1 = class k
    labels.txt          "<id> <class indices...>" per line (0-based classes)
    meta.json           num_classes, image_size, class_names
"""

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from ..core.exceptions import DatasetError, SampleError, ShapeError
from ..core.models import DatasetConfig, Sample
from ..core.seeds import export_mask, load_image, read_mask, save_image
from ..core.shapes import class_names, render_sample

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.txt"
META_FILE = "meta.json"


class DatasetService:
    """Creates, writes and reads image-level labelled datasets."""

    def generate_shapes(self, cfg: DatasetConfig) -> List[Sample]:
        """
        Generate the synthetic shapes dataset.

        Each sample uses its own generator seeded by ``(rng_seed, index)``,
        so the output depends only on ``cfg``.

        Raises:
            ShapeError: If image_size is not divisible by patch_size
        """
        if cfg.image_size % cfg.patch_size:
            raise ShapeError(f"image size {cfg.image_size} is not divisible by the patch size {cfg.patch_size}")

        samples = []
        for index in range(cfg.samples):
            rng = np.random.default_rng([cfg.rng_seed, index])
            image, mask, labels = render_sample(rng, cfg.image_size, cfg.num_classes, cfg.shapes_per_image)
            samples.append(Sample(id=f"img{index:05d}", image=image, labels=labels, gt_mask=mask))
        logger.info("generated %d samples (%d classes, seed %d)", len(samples), cfg.num_classes, cfg.rng_seed)
        return samples

    def write_dataset(self, samples: Sequence[Sample], out_dir: Union[str, Path], num_classes: int) -> Path:
        """Write ``samples`` in the directory layout described above."""
        if not samples:
            raise DatasetError("cannot write an empty dataset")
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)

        lines = []
        for sample in samples:
            save_image(sample.image, out_dir / "images" / f"{sample.id}.png")
            if sample.gt_mask is not None:
                export_mask(sample.gt_mask, out_dir / "masks" / f"{sample.id}.png")
            lines.append(" ".join([sample.id] + [str(c) for c in sample.positives]))

        (out_dir / LABELS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = {
            "num_classes": num_classes,
            "image_size": int(samples[0].image.shape[0]),
            "class_names": class_names(num_classes),
        }
        (out_dir / META_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        return out_dir

    def read_meta(self, root: Union[str, Path]) -> dict:
        path = Path(root) / META_FILE
        if not path.exists():
            return {}
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetError(f"cannot parse {path}: {e}") from e

    def _parse_labels(self, path: Path, num_classes: int) -> List[Tuple[str, np.ndarray]]:
        entries = []
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            sample_id, raw = parts[0], parts[1:]
            try:
                classes = [int(c) for c in raw]
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: class indices must be integers")
            if not classes:
                raise SampleError(sample_id, "no positive labels")
            if any(c < 0 or c >= num_classes for c in classes):
                raise SampleError(sample_id, f"class index outside 0..{num_classes - 1}")
            labels = np.zeros(num_classes, dtype=np.float32)
            labels[classes] = 1.0
            entries.append((sample_id, labels))
        return entries

    def load_voc_style(self, root_dir: Union[str, Path], num_classes: Optional[int] = None) -> List[Sample]:
        """
        Load a dataset directory.

        Only ids listed in labels.txt are loaded. Masks are optional per id.

        Args:
            root_dir: dataset root
            num_classes: number of foreground classes; read from meta.json when omitted

        Raises:
            DatasetError: When labels.txt is missing or the class count is unknown
            SampleError: When a listed image is missing or its mask size differs
        """
        root = Path(root_dir)
        labels_path = root / LABELS_FILE
        if not labels_path.exists():
            raise DatasetError(f"label file not found: {labels_path}")
        if num_classes is None:
            num_classes = self.read_meta(root).get("num_classes")
            if num_classes is None:
                raise DatasetError(f"{root} has no {META_FILE}; pass num_classes explicitly")

        samples = []
        for sample_id, labels in self._parse_labels(labels_path, int(num_classes)):
            image_path = root / "images" / f"{sample_id}.png"
            if not image_path.exists():
                raise SampleError(sample_id, f"image not found: {image_path}")
            image = load_image(image_path)

            gt_mask, warnings = None, []
            mask_path = root / "masks" / f"{sample_id}.png"
            if mask_path.exists():
                gt_mask = read_mask(mask_path)
                if gt_mask.shape != image.shape[:2]:
                    raise SampleError(sample_id, f"mask size {gt_mask.shape} differs from image size {image.shape[:2]}")
                present = {int(v) - 1 for v in np.unique(gt_mask) if 0 < v < 255}
                extra = sorted(present - set(int(c) for c in np.flatnonzero(labels)))
                if extra:
                    warnings.append(f"mask contains classes {extra} not in the image labels")
                    logger.warning("sample %s: mask classes %s not in labels", sample_id, extra)
            samples.append(Sample(id=sample_id, image=image, labels=labels, gt_mask=gt_mask, warnings=warnings))
        logger.info("loaded %d samples from %s", len(samples), root)
        return samples


class CobraDataset(Dataset):
    """
    Torch view of a sample list.

    Images are resized to ``image_size`` and, when ``crop`` is smaller,
    randomly cropped with a generator seeded per epoch and index.
    """

    def __init__(self, samples: Sequence[Sample], image_size: int, crop: Optional[int] = None, seed: int = 0):
        if not samples:
            raise DatasetError("dataset is empty")
        self.samples = list(samples)
        self.image_size = image_size
        self.crop = crop or image_size
        if self.crop > image_size:
            raise ShapeError(f"crop {self.crop} exceeds image size {image_size}")
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def image_tensor(self, index: int) -> torch.Tensor:
        """3 x S x S image resized to ``image_size``."""
        image = torch.from_numpy(np.ascontiguousarray(self.samples[index].image)).permute(2, 0, 1).float()
        if image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            image = F.interpolate(
                image.unsqueeze(0), size=(self.image_size, self.image_size), mode="bilinear", align_corners=False
            )[0]
        return image

    def __getitem__(self, index: int):
        image = self.image_tensor(index)
        if self.crop < self.image_size:
            gen = torch.Generator().manual_seed(self.seed * 1_000_003 + self.epoch * 10_007 + index)
            top, left = (int(v) for v in torch.randint(0, self.image_size - self.crop + 1, (2,), generator=gen))
            image = image[:, top: top + self.crop, left: left + self.crop]
        labels = torch.from_numpy(self.samples[index].labels.astype(np.float32))
        return image, labels, index
