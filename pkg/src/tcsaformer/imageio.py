"""Image reading (PNG, PPM, PGM) and 8-bit PGM mask writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageReadError(OSError):
    pass


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM/PGM as float32 RGB [H, W, 3] in [0, 1].

    Grayscale inputs are replicated to three channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "1", "I;16", "I"):
                arr = np.asarray(im.convert("L"))
                arr = np.repeat(arr[..., None], 3, axis=-1)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from None
    return arr.astype(np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    """Read a class-index mask (pixel value = class) as int64 [H, W]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")).astype(np.int64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageReadError(f"cannot read mask {path}: {e}") from None


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return img[rows][:, cols]


def write_pgm(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM mask must be 2-D with values in [0, 255]")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PPM")
