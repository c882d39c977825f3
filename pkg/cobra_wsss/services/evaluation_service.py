"""
Evaluation service: mIoU over mask directories or in-memory seeds, and
per-class result tables.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..core.exceptions import DatasetError
from ..core.metrics import ConfusionMatrix, diagnostic_counts, diagnostics_from_counts, iou_result
from ..core.models import Diagnostics, IouResult, MaskSource, Sample, SeedBundle
from ..core.seeds import read_mask, seed_to_label
from ..core.shapes import class_names as shape_class_names

logger = logging.getLogger(__name__)

BACKGROUND = "background"
TABLE_TEXT = "miou_table.txt"
TABLE_JSON = "miou_table.json"


def with_background(names: Sequence[str]) -> List[str]:
    return [BACKGROUND] + list(names)


class EvaluationService:
    """Computes mIoU tables and branch diagnostics."""

    def _class_names(self, gt_dir: Path, num_classes: Optional[int], masks: Sequence[np.ndarray]) -> List[str]:
        for meta_path in (gt_dir / "meta.json", gt_dir.parent / "meta.json"):
            if meta_path.exists():
                meta = json.loads(meta_path.read_text(encoding="utf-8"))
                names = meta.get("class_names") or shape_class_names(int(meta["num_classes"]))
                if num_classes is None or len(names) == num_classes:
                    return with_background(names)
        if num_classes is None:
            labels = [int(m[m != 255].max()) for m in masks if (m != 255).any()]
            num_classes = max(labels + [1])
        return with_background(f"class_{k}" for k in range(num_classes))

    def evaluate_dirs(
        self,
        pred_dir: Union[str, Path],
        gt_dir: Union[str, Path],
        num_classes: Optional[int] = None,
    ) -> IouResult:
        """
        mIoU of predicted masks against ground-truth masks paired by file stem.

        Class names come from a ``meta.json`` next to or above ``gt_dir`` when
        present; otherwise the class count is the largest label seen.

        Raises:
            DatasetError: When a prediction has no ground truth or nothing can be paired
        """
        pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
        for directory in (pred_dir, gt_dir):
            if not directory.is_dir():
                raise DatasetError(f"not a directory: {directory}")
        preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
        gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
        missing = sorted(set(preds) - set(gts))
        if missing:
            raise DatasetError(f"no ground truth for predictions: {', '.join(missing[:5])}")
        if not preds:
            raise DatasetError(f"no prediction masks in {pred_dir}")

        pairs = [(read_mask(gts[stem]), read_mask(preds[stem])) for stem in preds]
        names = self._class_names(gt_dir, num_classes, [m for pair in pairs for m in pair])
        cm = ConfusionMatrix(len(names) - 1)
        for gt, pred in pairs:
            if gt.shape != pred.shape:
                raise DatasetError(f"mask size mismatch: {gt.shape} vs {pred.shape}")
            cm.accumulate(gt, pred)
        result = iou_result(cm, names)
        logger.info("evaluated %d masks: mIoU %.4f", len(pairs), result.miou)
        return result

    def _paired(self, bundles: Sequence[SeedBundle], samples: Sequence[Sample]) -> List[Tuple[SeedBundle, Sample]]:
        by_id = {s.id: s for s in samples if s.gt_mask is not None}
        pairs = [(b, by_id[b.id]) for b in bundles if b.id in by_id]
        if not pairs:
            raise DatasetError("no seed has a ground-truth mask")
        return pairs

    def evaluate_seeds(
        self,
        bundles: Sequence[SeedBundle],
        samples: Sequence[Sample],
        class_names: Sequence[str],
        threshold: float,
        source: MaskSource = MaskSource.FUSE,
    ) -> IouResult:
        """Seed mIoU of one mask source; ``class_names`` excludes background."""
        cm = ConfusionMatrix(len(class_names))
        for bundle, sample in self._paired(bundles, samples):
            cm.accumulate(sample.gt_mask, seed_to_label(bundle.seed(source), bundle.positives, threshold))
        return iou_result(cm, with_background(class_names))

    def diagnostics(
        self,
        bundles: Sequence[SeedBundle],
        samples: Sequence[Sample],
        threshold: float,
        source: MaskSource = MaskSource.FUSE,
    ) -> Diagnostics:
        """Class precision and semantic sensitivity pooled over all images."""
        total = None
        for bundle, sample in self._paired(bundles, samples):
            counts = diagnostic_counts(bundle.seed(source), sample.gt_mask, threshold)
            total = counts if total is None else total + counts
        return diagnostics_from_counts(total)

    # ============= TABLES =============

    def to_frame(self, result: IouResult) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "class": result.class_names + ["mIoU"],
                "IoU": [np.nan if v is None else v for v in result.iou] + [result.miou],
            }
        )

    def write_tables(self, result: IouResult, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        """
        Write the per-class table as plain text and as a JSON key-value file.

        Returns:
            (text path, json path)
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path, json_path = out_dir / TABLE_TEXT, out_dir / TABLE_JSON
        frame = self.to_frame(result)
        text_path.write_text(
            frame.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="n/a") + "\n",
            encoding="utf-8",
        )
        payload: Dict[str, object] = dict(result.as_dict())
        payload["evaluated_pixels"] = result.evaluated_pixels
        payload["ignored_pixels"] = result.ignored_pixels
        json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return text_path, json_path
