"""Raster I/O helpers shared by the data loader and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


def read_gray(path: str | Path) -> np.ndarray:
    """Read a raster file as a float64 array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0.0, 1.0)
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape == (size, size):
        return pixels
    im = Image.fromarray(pixels.astype(np.float32), mode="F")
    out = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_gray8(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="L").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    return read_gray(path) >= 0.5


def write_gray16(path: str | Path, values: np.ndarray) -> None:
    arr = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_heatmap(path: str | Path, values: np.ndarray, cmap: str = "jet") -> None:
    from matplotlib import colormaps

    rgba = colormaps[cmap](np.clip(values, 0.0, 1.0))
    Image.fromarray((rgba[..., :3] * 255).astype(np.uint8), mode="RGB").save(path)
