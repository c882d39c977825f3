"""
Renderer for the synthetic shapes dataset.

Class k is always drawn as shape ``SHAPES[k % len(SHAPES)]`` in a colour
family of its own, on a textured background (gradient plus noise).
"""

import colorsys
from typing import List, Tuple

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")

RADIUS_RANGE = (0.12, 0.25)
COLOR_JITTER = 0.08
PIXEL_NOISE = 0.03
BACKGROUND_NOISE = 0.04
MAX_ATTEMPTS = 50


def shape_name(cls: int) -> str:
    return SHAPES[cls % len(SHAPES)]


def class_names(num_classes: int) -> List[str]:
    """Foreground class names, ``class_<k>_<shape>``."""
    return [f"class_{k}_{shape_name(k)}" for k in range(num_classes)]


def class_color(cls: int) -> np.ndarray:
    """Base RGB colour of a class; hues are spread by the golden ratio."""
    hue = (cls * 0.618034) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.9), dtype=np.float32)


def min_visible_pixels(size: int) -> int:
    return max(20, int(0.005 * size * size))


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """
    Boolean H x W mask of one shape centred at (cy, cx) with radius ``r``.

    Raises:
        ValueError: For an unknown shape name
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        side = 0.8 * r
        return (np.abs(dx) <= side) & (np.abs(dy) <= side)
    if kind == "triangle":
        # apex at cy - r, base of width 2r at cy + r
        half_width = (dy + r) / 2
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= half_width)
    if kind == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        dist = dx ** 2 + dy ** 2
        return (dist <= r ** 2) & (dist >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape '{kind}'")


def textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.65)
    tint = rng.uniform(-0.05, 0.05, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    amplitude = rng.uniform(0.05, 0.15)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    gradient = amplitude * (np.cos(angle) * xx + np.sin(angle) * yy - 0.5)
    image = base + gradient[..., None] + tint[None, None, :]
    image = image + rng.normal(0.0, BACKGROUND_NOISE, size=(size, size, 3))
    return image.astype(np.float32)


def _draw(
    rng: np.random.Generator,
    size: int,
    num_shapes: int,
    num_classes: int,
) -> Tuple[np.ndarray, np.ndarray]:
    image = textured_background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(num_shapes):
        cls = int(rng.integers(0, num_classes))
        r = rng.uniform(*RADIUS_RANGE) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        region = shape_mask(shape_name(cls), size, cy, cx, r)
        color = np.clip(class_color(cls) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0, 1)
        noise = rng.normal(0.0, PIXEL_NOISE, size=(int(region.sum()), 3))
        image[region] = color[None, :] + noise
        mask[region] = cls + 1
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def render_sample(
    rng: np.random.Generator,
    size: int,
    num_classes: int,
    max_shapes: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Render one image with 1..max_shapes shapes.

    Placements where some drawn class ends up with fewer than
    ``min_visible_pixels`` visible pixels are redrawn; the last attempt
    falls back to a single shape.

    Returns:
        (image H x W x 3 float32, mask H x W uint8 with 0 = background, multi-hot labels C)
    """
    minimum = min_visible_pixels(size)
    for attempt in range(MAX_ATTEMPTS):
        num_shapes = 1 if attempt == MAX_ATTEMPTS - 1 else int(rng.integers(1, max_shapes + 1))
        image, mask = _draw(rng, size, num_shapes, num_classes)
        counts = np.bincount(mask.ravel(), minlength=num_classes + 1)[1:]
        drawn = counts > 0
        if drawn.any() and (counts[drawn] >= minimum).all():
            return image, mask, drawn.astype(np.float32)
    raise RuntimeError("could not place a visible shape")
