"""
Small configurations and fixtures shared by the tests.
"""

from typing import List

import numpy as np

from cobra_wsss.core.models import CobraConfig, Sample
from cobra_wsss.core.shapes import render_sample


def tiny_config(**train) -> CobraConfig:
    """A 32 x 32, 3-class configuration that trains in seconds on a CPU."""
    data = {
        "data": {"num_classes": 3, "image_size": 32, "samples": 8, "patch_size": 8},
        "model": {
            "num_classes": 3,
            "image_size": 32,
            "patch_size": 8,
            "cnn_channels": [4, 8, 8, 8],
            "cnn_strides": [1, 2, 2, 2],
            "embed_dim": 8,
            "depth": 2,
            "num_heads": 2,
            "proj_dim": 8,
        },
        "train": {
            "epochs": 2,
            "batch_size": 4,
            "crop": 32,
            "lr": 1e-3,
            "selection": {"k_sap_pos": 4, "k_sap_neg": 4, "k_cap_pos": 3, "k_cap_neg": 4},
        },
        "inference": {"scales": [1.0]},
    }
    data["train"].update(train)
    return CobraConfig.model_validate(data)


def shape_samples(count: int, size: int = 32, num_classes: int = 3, seed: int = 0) -> List[Sample]:
    samples = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        image, mask, labels = render_sample(rng, size, num_classes, 2)
        samples.append(Sample(id=f"img{index:05d}", image=image, labels=labels, gt_mask=mask))
    return samples
