"""
Report service: per-image comparison panels and the per-class mIoU table.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots
from pydantic import BaseModel

from ..core.exceptions import DatasetError
from ..core.models import MaskSource, SeedBundle
from ..core.seeds import load_image, read_mask, voc_palette
from .evaluation_service import EvaluationService
from .mask_service import MASKS_DIR, MaskService

logger = logging.getLogger(__name__)

REPORT_DIR = "report"
PANELS_DIR = "panels"


class ReportResult(BaseModel):
    """Files written by a report."""

    panels: List[Path]
    tables: Optional[Tuple[Path, Path]] = None
    miou: Optional[float] = None


def colorize(labels: np.ndarray) -> np.ndarray:
    """H x W labels to H x W x 3 uint8 with the mask palette."""
    palette = np.asarray(voc_palette(), dtype=np.uint8).reshape(256, 3)
    return palette[labels.astype(np.uint8)]


def _class_max(maps) -> np.ndarray:
    return maps.detach().float().cpu().numpy().max(axis=0)


class ReportService:
    """Builds the visual report of a run directory."""

    def __init__(self, mask_service: Optional[MaskService] = None, evaluation_service: Optional[EvaluationService] = None):
        self.mask_service = mask_service or MaskService()
        self.evaluation_service = evaluation_service or EvaluationService()

    def panel(
        self,
        bundle: SeedBundle,
        image: np.ndarray,
        trimap: np.ndarray,
        gt_mask: Optional[np.ndarray],
    ) -> go.Figure:
        """Image | CNN CAM | transformer CAM | fused CAM | trimap | ground truth (when known)."""
        titles = ["Image", "CNN CAM", "Transformer CAM", "Fused CAM", "Trimap"]
        if gt_mask is not None:
            titles.append("Ground truth")
        fig = make_subplots(rows=1, cols=len(titles), subplot_titles=titles, horizontal_spacing=0.02)

        fig.add_trace(go.Image(z=np.round(image * 255).astype(np.uint8)), row=1, col=1)
        for col, source in enumerate((MaskSource.CNN, MaskSource.TRAN, MaskSource.FUSE), start=2):
            fig.add_trace(
                go.Heatmap(z=_class_max(bundle.maps[source]), zmin=0, zmax=1, colorscale="Jet", showscale=False),
                row=1,
                col=col,
            )
        fig.add_trace(go.Image(z=colorize(trimap)), row=1, col=5)
        if gt_mask is not None:
            fig.add_trace(go.Image(z=colorize(gt_mask)), row=1, col=6)

        fig.update_xaxes(showticklabels=False)
        fig.update_yaxes(showticklabels=False, autorange="reversed", scaleanchor="x")
        fig.update_layout(
            title=f"{bundle.id} (classes {bundle.positives})",
            width=220 * len(titles),
            height=300,
            margin=dict(l=10, r=10, t=60, b=10),
        )
        return fig

    def report(self, run_dir: Union[str, Path], data_dir: Optional[Union[str, Path]] = None) -> ReportResult:
        """
        Write one panel file per seed and, when every image has ground truth,
        the per-class mIoU table of the run's masks.

        Args:
            run_dir: run directory holding seeds/ and masks/
            data_dir: dataset directory; taken from run.json when omitted

        Raises:
            DatasetError: When the dataset or the masks cannot be found
        """
        run_dir = Path(run_dir)
        data_dir = data_dir or self.mask_service.read_run_info(run_dir).get("data")
        if not data_dir:
            raise DatasetError(f"{run_dir} does not name its dataset; pass the data directory")
        data_dir = Path(data_dir)
        masks_dir = run_dir / MASKS_DIR
        if not masks_dir.is_dir():
            raise DatasetError(f"{masks_dir} not found; create masks before reporting")

        out_dir = run_dir / REPORT_DIR
        (out_dir / PANELS_DIR).mkdir(parents=True, exist_ok=True)
        panels, all_gt = [], True
        for bundle in self.mask_service.load_seeds(run_dir):
            image = load_image(data_dir / "images" / f"{bundle.id}.png")
            trimap = read_mask(masks_dir / f"{bundle.id}.png")
            gt_path = data_dir / "masks" / f"{bundle.id}.png"
            gt_mask = read_mask(gt_path) if gt_path.exists() else None
            all_gt = all_gt and gt_mask is not None

            path = out_dir / PANELS_DIR / f"{bundle.id}.html"
            self.panel(bundle, image, trimap, gt_mask).write_html(path, include_plotlyjs="cdn")
            panels.append(path)

        if not all_gt:
            logger.info("ground truth incomplete; mIoU table omitted")
            return ReportResult(panels=panels)
        result = self.evaluation_service.evaluate_dirs(masks_dir, data_dir / "masks")
        tables = self.evaluation_service.write_tables(result, out_dir)
        return ReportResult(panels=panels, tables=tables, miou=result.miou)
