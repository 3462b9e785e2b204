"""Image file helpers: 8-bit RGB for color, 32-bit float TIFF for depth."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["load_image", "save_image", "load_mask", "save_mask", "load_depth", "save_depth"]


def load_image(path) -> np.ndarray:
    """Read an image file as float RGB in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Write float RGB in [0, 1] (or uint8) as an 8-bit image file."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Read a single-channel mask as float in [0, 1], shape (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    arr = (np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def save_depth(path, depth: np.ndarray) -> None:
    """Write a depth map as a 32-bit float TIFF."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(depth, dtype=np.float32), mode="F").save(path, format="TIFF")


def load_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32)
