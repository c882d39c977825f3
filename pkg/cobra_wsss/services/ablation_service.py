"""
Ablation service: loss-combination rows, mask-source variants and branch
diagnostics, each repeated over several seeds and summarised by the median.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from ..core.models import BranchMode, CobraConfig, MaskSource, Sample
from ..core.settings import save_config_snapshot
from ..core.shapes import class_names
from .evaluation_service import EvaluationService
from .training_service import TrainingService

logger = logging.getLogger(__name__)


class AblationRow(BaseModel):
    """One training variant."""

    name: str
    branches: BranchMode
    lambda1: float
    lambda2: float
    enable_cap: bool = True
    enable_sap: bool = True

    def apply(self, cfg: CobraConfig, seed: int) -> CobraConfig:
        data = cfg.model_dump()
        data["train"]["branches"] = self.branches
        data["train"]["rng_seed"] = seed
        loss = data["train"]["loss"]
        loss.update(lambda1=self.lambda1, lambda2=self.lambda2, enable_cap=self.enable_cap, enable_sap=self.enable_sap)
        return CobraConfig.model_validate(data)


def default_rows(cfg: CobraConfig) -> List[AblationRow]:
    """Rows of the loss ablation, from single branches up to all losses."""
    l1, l2 = cfg.train.loss.lambda1, cfg.train.loss.lambda2
    return [
        AblationRow(name="cak", branches=BranchMode.CAK, lambda1=0.0, lambda2=0.0),
        AblationRow(name="sak", branches=BranchMode.SAK, lambda1=0.0, lambda2=0.0),
        AblationRow(name="cam", branches=BranchMode.BOTH, lambda1=l1, lambda2=0.0),
        AblationRow(name="cam+cap", branches=BranchMode.BOTH, lambda1=l1, lambda2=l2, enable_sap=False),
        AblationRow(name="cam+sap", branches=BranchMode.BOTH, lambda1=l1, lambda2=l2, enable_cap=False),
        AblationRow(name="full", branches=BranchMode.BOTH, lambda1=l1, lambda2=l2),
    ]


class AblationResult(BaseModel):
    """Median-over-seeds tables and the files they were written to."""

    losses: Dict[str, float]
    sources: Dict[str, float]
    diagnostics: Dict[str, Dict[str, float]]
    files: List[Path]


class AblationService:
    """Trains every ablation row for every seed and evaluates the seeds."""

    def __init__(
        self,
        training_service: Optional[TrainingService] = None,
        evaluation_service: Optional[EvaluationService] = None,
    ):
        self.training_service = training_service or TrainingService()
        self.evaluation_service = evaluation_service or EvaluationService()

    def run(
        self,
        cfg: CobraConfig,
        train_samples: Sequence[Sample],
        eval_samples: Sequence[Sample],
        out_dir: Union[str, Path],
        seeds: Sequence[int] = (0, 1, 2),
        rows: Optional[Sequence[AblationRow]] = None,
        on_row: Optional[Callable[[str, int, float], None]] = None,
    ) -> AblationResult:
        """
        Run the ablation grid.

        Args:
            cfg: base configuration
            train_samples: training split
            eval_samples: evaluation split with ground-truth masks
            out_dir: output directory; one sub-directory per (row, seed)
            seeds: training seeds
            rows: variants to train; ``default_rows(cfg)`` when omitted
            on_row: called with (row name, seed, fused seed mIoU) after each run

        Returns:
            AblationResult with medians over seeds
        """
        out_dir = Path(out_dir)
        save_config_snapshot(cfg, out_dir)
        rows = list(rows) if rows is not None else default_rows(cfg)
        names = class_names(cfg.model.num_classes)
        inference = cfg.inference

        records = []
        for row in rows:
            for seed in seeds:
                row_cfg = row.apply(cfg, seed)
                run_dir = out_dir / row.name / f"seed{seed}"
                result = self.training_service.train(row_cfg, train_samples, run_dir)
                bundles = self.training_service.infer(result.checkpoint, eval_samples, inference.scales, row_cfg)
                for source in MaskSource:
                    iou = self.evaluation_service.evaluate_seeds(
                        bundles, eval_samples, names, inference.seed_threshold, source
                    )
                    records.append({"row": row.name, "seed": seed, "kind": "miou", "source": source.value, "value": iou.miou})
                diag = self.evaluation_service.diagnostics(
                    bundles, eval_samples, inference.diagnostics_threshold, MaskSource.FUSE
                )
                records.append({"row": row.name, "seed": seed, "kind": "precision", "source": "fuse", "value": diag.class_precision})
                records.append({"row": row.name, "seed": seed, "kind": "sensitivity", "source": "fuse", "value": diag.semantic_sensitivity})
                fused = next(r["value"] for r in records[::-1] if r["kind"] == "miou" and r["source"] == "fuse")
                logger.info("ablation %s seed %d: fused seed mIoU %.4f", row.name, seed, fused)
                if on_row is not None:
                    on_row(row.name, seed, fused)

        frame = pd.DataFrame.from_records(records)
        frame.to_csv(out_dir / "ablation_runs.csv", index=False, float_format="%.6f")
        medians = frame.groupby(["row", "kind", "source"], sort=False)["value"].median()

        order = [row.name for row in rows]
        losses = {name: float(medians[(name, "miou", "fuse")]) for name in order}
        full = "full" if "full" in order else order[-1]
        sources = {s.value: float(medians[(full, "miou", s.value)]) for s in MaskSource}
        diagnostics = {
            name: {
                "class_precision": float(medians[(name, "precision", "fuse")]),
                "semantic_sensitivity": float(medians[(name, "sensitivity", "fuse")]),
            }
            for name in order
        }

        files = [out_dir / "ablation_runs.csv"]
        tables = {
            "ablation_losses.txt": pd.DataFrame({"row": order, "seed_miou": [losses[n] for n in order]}),
            "ablation_sources.txt": pd.DataFrame({"source": list(sources), "seed_miou": list(sources.values())}),
            "ablation_diagnostics.txt": pd.DataFrame.from_dict(diagnostics, orient="index").rename_axis("row").reset_index(),
        }
        for filename, table in tables.items():
            path = out_dir / filename
            path.write_text(table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n", encoding="utf-8")
            files.append(path)
        return AblationResult(losses=losses, sources=sources, diagnostics=diagnostics, files=files)
