"""
Seed and mask files of a run directory.

Run layout::

    seeds/<id>.cbt          all seed variants, object attention, positives
    seed_labels/<id>.png    dense seed labels (for seed mIoU)
    masks/<id>.png          trimaps (0 background, 255 unknown, k+1 class k)
    run.json                data directory and checkpoint the seeds came from
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..core.exceptions import DatasetError
from ..core.models import MaskSource, SeedBundle, ThresholdConfig
from ..core.seeds import crf_hook, export_mask, load_bundle, make_trimap, save_bundle, seed_to_label

logger = logging.getLogger(__name__)

SEEDS_DIR = "seeds"
SEED_LABELS_DIR = "seed_labels"
MASKS_DIR = "masks"
RUN_FILE = "run.json"


class MaskService:
    """Writes seeds and turns them into trimaps."""

    def write_seeds(
        self,
        bundles: Sequence[SeedBundle],
        run_dir: Union[str, Path],
        threshold: float,
        source: MaskSource = MaskSource.FUSE,
        run_info: Optional[Dict[str, str]] = None,
    ) -> Path:
        """
        Store every bundle and its dense seed label map.

        Args:
            bundles: seeds of the run
            run_dir: run directory
            threshold: background score of the dense labels
            source: mask source of the dense labels
            run_info: provenance written to run.json
        """
        run_dir = Path(run_dir)
        (run_dir / SEEDS_DIR).mkdir(parents=True, exist_ok=True)
        for bundle in bundles:
            save_bundle(bundle, run_dir / SEEDS_DIR / f"{bundle.id}.cbt")
            labels = seed_to_label(bundle.seed(source), bundle.positives, threshold)
            export_mask(labels, run_dir / SEED_LABELS_DIR / f"{bundle.id}.png")
        if run_info is not None:
            (run_dir / RUN_FILE).write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("wrote %d seeds to %s", len(bundles), run_dir / SEEDS_DIR)
        return run_dir / SEEDS_DIR

    def read_run_info(self, run_dir: Union[str, Path]) -> Dict[str, str]:
        path = Path(run_dir) / RUN_FILE
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def load_seeds(self, run_dir: Union[str, Path]) -> List[SeedBundle]:
        """All seed bundles of a run, sorted by id."""
        seeds_dir = Path(run_dir) / SEEDS_DIR
        paths = sorted(seeds_dir.glob("*.cbt"))
        if not paths:
            raise DatasetError(f"no seed files in {seeds_dir}")
        return [load_bundle(path) for path in paths]

    def make_masks(
        self,
        run_dir: Union[str, Path],
        cfg: ThresholdConfig,
        source: MaskSource = MaskSource.FUSE,
        images: Optional[Dict[str, np.ndarray]] = None,
        crf_command: Optional[str] = None,
    ) -> int:
        """
        Write one trimap per seed of the run.

        When ``images`` are given, each seed first passes through the CRF
        hook, which leaves it unchanged unless a CRF command is configured.

        Returns:
            Number of masks written
        """
        run_dir = Path(run_dir)
        count = 0
        for bundle in self.load_seeds(run_dir):
            seed = bundle.seed(source)
            if images is not None and bundle.id in images:
                seed = crf_hook(seed, images[bundle.id], crf_command)
            trimap = make_trimap(seed, bundle.obj, bundle.positives, cfg)
            export_mask(trimap, run_dir / MASKS_DIR / f"{bundle.id}.png")
            count += 1
        logger.info("wrote %d masks (source %s) to %s", count, source.value, run_dir / MASKS_DIR)
        return count
