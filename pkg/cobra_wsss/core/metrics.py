"""
Segmentation metrics: confusion matrix, mIoU and branch diagnostics.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .models import Diagnostics, IouResult, Seed

IGNORE = 255


class ConfusionMatrix:
    """
    (C+1) x (C+1) pixel counts, row = ground truth, column = prediction.

    Index 0 is background. Pixels labelled 255 in either mask are not
    counted but tallied in ``ignored``.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        self.ignored = 0

    @property
    def size(self) -> int:
        return self.num_classes + 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, gt_mask: np.ndarray, pred_mask: np.ndarray) -> "ConfusionMatrix":
        """
        Add one image.

        Args:
            gt_mask: H x W labels in {0..C} (255 ignored)
            pred_mask: H x W labels in {0..C} (255 = unknown, ignored)

        Returns:
            self, for chaining
        """
        gt = np.asarray(gt_mask).astype(np.int64).ravel()
        pred = np.asarray(pred_mask).astype(np.int64).ravel()
        if np.asarray(gt_mask).shape != np.asarray(pred_mask).shape:
            raise ValueError(f"mask shapes differ: {np.shape(gt_mask)} vs {np.shape(pred_mask)}")

        keep = (gt != IGNORE) & (pred != IGNORE)
        self.ignored += int((~keep).sum())
        gt, pred = gt[keep], pred[keep]
        if gt.size and (gt.max() >= self.size or pred.max() >= self.size or gt.min() < 0 or pred.min() < 0):
            raise ValueError(f"mask labels must lie in 0..{self.num_classes} or be {IGNORE}")
        self.counts += np.bincount(self.size * gt + pred, minlength=self.size ** 2).reshape(self.size, self.size)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Sum of two matrices over the same classes."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        merged.ignored = self.ignored + other.ignored
        return merged

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)


def accumulate(cm: ConfusionMatrix, gt_mask: np.ndarray, pred_mask: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(gt_mask, pred_mask)


def miou(cm: ConfusionMatrix) -> Tuple[List[Optional[float]], float]:
    """
    Per-class IoU and their mean.

    IoU_c = TP / (TP + FP + FN); classes with a zero denominator are
    reported as None and left out of the mean.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    iou: List[Optional[float]] = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    defined = [v for v in iou if v is not None]
    return iou, float(np.mean(defined)) if defined else 0.0


def iou_result(cm: ConfusionMatrix, class_names: Sequence[str]) -> IouResult:
    """``miou`` packaged with class names and pixel counts."""
    if len(class_names) != cm.size:
        raise ValueError(f"expected {cm.size} class names (background first), got {len(class_names)}")
    per_class, mean = miou(cm)
    return IouResult(
        class_names=list(class_names),
        iou=per_class,
        miou=mean,
        evaluated_pixels=cm.total,
        ignored_pixels=cm.ignored,
    )


# ============= BRANCH DIAGNOSTICS =============

def diagnostic_counts(seed: Seed, gt_mask: np.ndarray, threshold: float) -> np.ndarray:
    """
    Per-class TP, FP and FN of the seed binarised at ``threshold``.

    Returns:
        C x 3 int array; classes absent from ``gt_mask`` get zero rows
    """
    values = seed.values.detach().float().cpu().numpy()
    gt = np.asarray(gt_mask)
    if values.shape[-2:] != gt.shape:
        raise ValueError(f"seed size {values.shape[-2:]} does not match mask size {gt.shape}")
    valid = gt != IGNORE
    counts = np.zeros((values.shape[0], 3), dtype=np.int64)
    for c in range(values.shape[0]):
        truth = (gt == c + 1) & valid
        if not truth.any():
            continue
        pred = (values[c] >= threshold) & valid
        counts[c] = (
            int((pred & truth).sum()),
            int((pred & ~truth).sum()),
            int((~pred & truth).sum()),
        )
    return counts


def diagnostics_from_counts(counts: np.ndarray) -> Diagnostics:
    """Macro averages over classes with a defined ratio; 0 when none is defined."""
    precisions, sensitivities = [], []
    for tp, fp, fn in counts:
        if tp + fp > 0:
            precisions.append(tp / (tp + fp))
        if tp + fn > 0:
            sensitivities.append(tp / (tp + fn))
    return Diagnostics(
        class_precision=float(np.mean(precisions)) if precisions else 0.0,
        semantic_sensitivity=float(np.mean(sensitivities)) if sensitivities else 0.0,
    )


def branch_diagnostics(seed: Seed, gt_mask: np.ndarray, threshold: float) -> Diagnostics:
    """
    Class precision TP/(TP+FP) and semantic sensitivity TP/(TP+FN) of one seed.

    Both are macro-averaged over the classes present in ``gt_mask``.
    """
    return diagnostics_from_counts(diagnostic_counts(seed, gt_mask, threshold))
