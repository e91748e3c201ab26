"""Grayscale image IO: 16-bit PNG and headerless little-endian float32 planes."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

RAW_SUFFIXES = (".f32", ".raw")


def read_image(path, shape: Optional[tuple] = None) -> np.ndarray:
    """Load a grayscale image as float64 in [0, 1].

    Raw float32 files carry no header; pass ``shape`` unless the image is square.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() in RAW_SUFFIXES:
        values = np.fromfile(path, dtype="<f4").astype(np.float64)
        if shape is None:
            side = math.isqrt(values.size)
            if side * side != values.size:
                raise ValueError(f"{path}: {values.size} values is not square; pass shape")
            shape = (side, side)
        return values.reshape(shape)
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if path.suffix.lower() in RAW_SUFFIXES:
        x.astype("<f4").tofile(path)
        return
    PILImage.fromarray(np.round(x * 65535.0).astype(np.uint16)).save(path)


def write_mask_image(path, mask: np.ndarray) -> None:
    """Debug view of a boolean coefficient mask as an 8-bit PNG."""
    PILImage.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)
