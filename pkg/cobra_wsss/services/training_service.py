"""
Training service: the dual-branch training loop, checkpoints and inference.
"""

import json
import logging
import math
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from pydantic import BaseModel
from torch.utils.data import DataLoader

from ..core.branches import CobraModel
from ..core.exceptions import CheckpointError, TrainingError
from ..core.losses import (
    LossParts,
    batch_contrastive_loss,
    cam_loss,
    cls_loss,
    objective,
    total_loss,
)
from ..core.models import CobraConfig, LossReport, OptimizerName, Sample, SeedBundle, TrainConfig
from ..core.seeds import attention_record, multiscale_bundle, save_attention
from ..core.selection import build_batch_selections
from ..core.settings import save_config_snapshot, validate_config
from ..core.storage import load_checkpoint, load_state_into, save_checkpoint
from .dataset_service import CobraDataset

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
METRIC_COLUMNS = ["epoch", "step", "cls", "cam", "cap", "sap", "total"]
LAST_CHECKPOINT = "checkpoint_last.cbt"
NAN_DUMP = "nan_dump.json"

EpochCallback = Callable[[int, LossReport], None]


class TrainResult(BaseModel):
    """Files and per-epoch mean losses of a finished run."""

    out_dir: Path
    checkpoint: Path
    metrics: Path
    steps: int
    history: List[LossReport]


def compute_loss_parts(
    model: CobraModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    epoch: int,
) -> LossParts:
    """
    Forward both active branches on the same batch and compute every loss term.

    The CAM term is only computed once it is active; selections are only
    built when a contrastive term carries weight. Selections come from
    gradient-stopped signals of the other branch.
    """
    out = model(images)
    cak, sak = out.cak, out.sak
    cls = cls_loss(
        cak.scores if cak else None,
        sak.scores if sak else None,
        labels,
        scores_token=sak.token_scores if sak else None,
    )
    cam = cap = sap = cls.new_zeros(())
    loss_cfg = cfg.loss

    if cak is not None and sak is not None:
        if loss_cfg.lambda1 > 0 and epoch >= loss_cfg.cam_loss_start_epoch:
            cam = cam_loss(cak.cams.values, sak.cams.values, labels)
        need_cap = loss_cfg.lambda2 > 0 and loss_cfg.enable_cap
        need_sap = loss_cfg.lambda2 > 0 and loss_cfg.enable_sap
        if need_cap or need_sap:
            cap_sets, sap_sets = build_batch_selections(
                cak.cams.values, sak.affinity.values, labels, cfg.selection, need_cap, need_sap
            )
            if need_cap:
                cap = batch_contrastive_loss(cak.cap.vectors, cap_sets, loss_cfg.tau)
            if need_sap:
                sap = batch_contrastive_loss(sak.sap.vectors, sap_sets, loss_cfg.tau)
    return LossParts(cls=cls, cam=cam, cap=cap, sap=sap)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == OptimizerName.SGD_MOMENTUM:
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _metric_row(epoch: int, step: int, report: LossReport) -> dict:
    return {"epoch": epoch, "step": step, **report.model_dump(include={"cls", "cam", "cap", "sap", "total"})}


class TrainingService:
    """Trains CoBra models and produces seeds from checkpoints."""

    def build_model(self, cfg: CobraConfig) -> CobraModel:
        return CobraModel(cfg.model, cfg.train.branches)

    def train(
        self,
        cfg: CobraConfig,
        samples: Sequence[Sample],
        out_dir: Union[str, Path],
        on_epoch: Optional[EpochCallback] = None,
    ) -> TrainResult:
        """
        Train a model on ``samples`` and write checkpoints and the metrics log.

        Args:
            cfg: resolved configuration
            samples: training samples
            out_dir: run directory (created if absent)
            on_epoch: called with (epoch, mean losses) after every epoch

        Returns:
            TrainResult

        Raises:
            TrainingError: On a non-finite loss, after writing nan_dump.json
        """
        if not samples:
            raise TrainingError("training set is empty")
        train_cfg = cfg.train
        grid = train_cfg.crop // cfg.model.patch_size
        train_cfg.selection.check_grid(grid * grid)

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config_snapshot(cfg, out_dir)
        metrics_path = out_dir / METRICS_FILE
        if metrics_path.exists():
            metrics_path.unlink()

        was_deterministic = torch.are_deterministic_algorithms_enabled()
        torch.use_deterministic_algorithms(True, warn_only=True)
        try:
            return self._run(cfg, samples, out_dir, metrics_path, on_epoch)
        finally:
            torch.use_deterministic_algorithms(was_deterministic)

    def _run(self, cfg, samples, out_dir: Path, metrics_path: Path, on_epoch) -> TrainResult:
        train_cfg = cfg.train
        device = torch.device(train_cfg.device)
        torch.manual_seed(train_cfg.rng_seed)

        model = self.build_model(cfg).to(device)
        dataset = CobraDataset(samples, cfg.model.image_size, train_cfg.crop, seed=train_cfg.rng_seed)
        loader = DataLoader(
            dataset,
            batch_size=train_cfg.batch_size,
            shuffle=True,
            num_workers=train_cfg.num_workers,
            generator=torch.Generator().manual_seed(train_cfg.rng_seed),
        )
        optimizer = build_optimizer(model, train_cfg)
        total_steps = train_cfg.epochs * len(loader)
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps))

        history: List[LossReport] = []
        step = 0
        checkpoint = out_dir / LAST_CHECKPOINT
        for epoch in range(train_cfg.epochs):
            model.train()
            dataset.set_epoch(epoch)
            rows = []
            for images, labels, indices in loader:
                images, labels = images.to(device), labels.to(device)
                parts = compute_loss_parts(model, images, labels, train_cfg, epoch)
                loss = objective(parts, train_cfg.loss, epoch)
                report = total_loss(parts, train_cfg.loss, epoch)
                if not torch.isfinite(loss):
                    batch_ids = [samples[int(i)].id for i in indices]
                    self._dump_nan(out_dir, epoch, step, batch_ids, report)
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, step {step}",
                        batch_ids=batch_ids,
                        dump_path=str(out_dir / NAN_DUMP),
                    )

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                scheduler.step()
                rows.append(_metric_row(epoch, step, report))
                step += 1

            frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
            frame.to_csv(
                metrics_path,
                mode="a",
                header=epoch == 0,
                index=False,
                float_format="%.6f",
                lineterminator="\n",
            )
            means = frame[["cls", "cam", "cap", "sap", "total"]].mean()
            mean_report = LossReport(**{k: float(v) for k, v in means.items()})
            history.append(mean_report)
            logger.info(
                "epoch %d: cls=%.4f cam=%.4f cap=%.4f sap=%.4f total=%.4f",
                epoch, mean_report.cls, mean_report.cam, mean_report.cap, mean_report.sap, mean_report.total,
            )

            metadata = {"config": cfg.model_dump(mode="json"), "epoch": epoch}
            save_checkpoint(model, out_dir / f"checkpoint_epoch{epoch}.cbt", metadata)
            save_checkpoint(model, checkpoint, metadata)
            if on_epoch is not None:
                on_epoch(epoch, mean_report)

        return TrainResult(out_dir=out_dir, checkpoint=checkpoint, metrics=metrics_path, steps=step, history=history)

    @staticmethod
    def _dump_nan(out_dir: Path, epoch: int, step: int, batch_ids: List[str], report: LossReport) -> None:
        payload = {
            "epoch": epoch,
            "step": step,
            "batch_ids": batch_ids,
            "losses": {k: (v if math.isfinite(v) else str(v)) for k, v in report.model_dump().items()},
        }
        (out_dir / NAN_DUMP).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        logger.error("non-finite loss, batch %s dumped to %s", batch_ids, out_dir / NAN_DUMP)

    # ============= INFERENCE =============

    def load_model(
        self, checkpoint: Union[str, Path], cfg: Optional[CobraConfig] = None
    ) -> Tuple[CobraModel, CobraConfig]:
        """
        Rebuild a model from a checkpoint.

        Args:
            checkpoint: checkpoint file
            cfg: configuration to build the model from; the one stored in the checkpoint when omitted

        Returns:
            (model in eval mode, the configuration it was built from)

        Raises:
            CheckpointError: When the stored tensors do not fit the model
        """
        state, metadata = load_checkpoint(checkpoint)
        if cfg is None:
            if "config" not in metadata:
                raise CheckpointError(f"{checkpoint} carries no configuration")
            cfg = validate_config(metadata["config"])
        model = self.build_model(cfg)
        load_state_into(model, state)
        model.to(torch.device(cfg.train.device))
        model.eval()
        return model, cfg

    def infer(
        self,
        checkpoint: Union[str, Path],
        samples: Sequence[Sample],
        scales: Optional[Sequence[float]] = None,
        cfg: Optional[CobraConfig] = None,
    ) -> List[SeedBundle]:
        """
        Multi-scale seeds for every sample.

        Args:
            checkpoint: checkpoint file
            samples: images with image-level labels (the seeds keep positive classes only)
            scales: inference scales; the configured ones when omitted
            cfg: optional configuration overriding the stored one
        """
        model, cfg = self.load_model(checkpoint, cfg)
        return self.infer_model(model, samples, list(scales) if scales else cfg.inference.scales)

    def infer_model(self, model: CobraModel, samples: Sequence[Sample], scales: Sequence[float]) -> List[SeedBundle]:
        """Multi-scale seeds for every sample from an already loaded model."""
        scales = list(scales)
        device = next(model.parameters()).device

        bundles = []
        for sample in samples:
            image = torch.from_numpy(sample.image).permute(2, 0, 1).float().to(device)
            bundle = multiscale_bundle(model, image, scales, sample.id, sample.positives)
            bundles.append(bundle)
        logger.info("computed seeds for %d images at scales %s", len(bundles), scales)
        return bundles

    def export_attention(self, model: CobraModel, samples: Sequence[Sample], out_dir: Union[str, Path]) -> List[Path]:
        """
        Write the scale-1 transformer attention of every sample to ``<out_dir>/<id>.cbt``.

        Each file holds the per-layer attention (L x T x T), the patch affinity
        (P x P) and the object attention (P), with the gh x gw grid in its metadata.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        device = next(model.parameters()).device
        paths = []
        for sample in samples:
            image = torch.from_numpy(sample.image).permute(2, 0, 1).float().to(device)
            tensors, grid = attention_record(model, image)
            path = out_dir / f"{sample.id}.cbt"
            save_attention(tensors, grid, sample.id, path)
            paths.append(path)
        logger.info("exported attention of %d images to %s", len(paths), out_dir)
        return paths


def classification_accuracy(model: CobraModel, samples: Sequence[Sample], image_size: int) -> float:
    """Fraction of (image, class) decisions where sigmoid > 0.5 matches the label, averaged over active branches."""
    dataset = CobraDataset(samples, image_size)
    model.eval()
    correct, total = 0, 0
    with torch.no_grad():
        for index in range(len(dataset)):
            image, labels, _ = dataset[index]
            out = model(image.unsqueeze(0))
            for branch in (out.cak, out.sak):
                if branch is None:
                    continue
                predicted = (torch.sigmoid(branch.scores[0]) > 0.5).float()
                correct += int((predicted == labels).sum())
                total += labels.numel()
    return correct / total if total else 0.0
