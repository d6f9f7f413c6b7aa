"""Seeded synthetic segmentation samples: colored shapes on a noisy background."""

from __future__ import annotations

import numpy as np


def synthetic_sample(seed: int = 0, height: int = 64, width: int = 64, num_classes: int = 3,
                     noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image [1, H, W, 3] float32 in [0, 1], mask [1, H, W] int64)``.

    Class 0 is background; classes 1.. alternate between discs and rectangles,
    each painted in its own color. Later shapes overwrite earlier ones.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    mask = np.zeros((height, width), dtype=np.int64)
    palette = rng.uniform(0.0, 1.0, size=(num_classes, 3))
    palette[0] = (0.1, 0.1, 0.1)
    for c in range(1, num_classes):
        palette[c] = np.roll((0.9, 0.5, 0.2), c - 1)
        size = rng.uniform(0.15, 0.3) * min(height, width)
        cy, cx = rng.uniform(size, height - size), rng.uniform(size, width - size)
        if c % 2:
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
        else:
            region = (np.abs(yy - cy) <= size * 0.8) & (np.abs(xx - cx) <= size)
        mask[region] = c
    img = palette[mask] + rng.normal(0.0, noise, size=(height, width, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], mask[None]
