"""Retinal-band mask extraction with a multi-scale horizontal Gabor bank."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass
class GaborBankConfig:
    wavelengths: tuple[float, ...] = (2.0, 4.0)
    orientation: float = 0.0  # radians; 0 = horizontal stripes (carrier runs down the columns)
    sigma_ratio: float = 0.56
    aspect: float = 0.5
    kernel_size_factor: float = 1.5
    binarize: str = "otsu"
    close_size: tuple[int, int] = (3, 9)
    open_size: tuple[int, int] = (3, 3)
    min_area_fraction: float = 0.005
    min_coverage: float = 0.05
    max_coverage: float = 0.80
    artifact_threshold: float = 0.95

    def __post_init__(self) -> None:
        w = tuple(float(v) for v in self.wavelengths)
        if len(w) < 1 or any(v <= 1.0 for v in w):
            raise ValueError("Gabor wavelengths must all exceed 1 pixel")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError("Gabor wavelengths must be strictly increasing")
        self.wavelengths = w
        if not 0.0 <= self.min_coverage < self.max_coverage <= 1.0:
            raise ValueError("need 0 <= min_coverage < max_coverage <= 1")

    def scaled(self, resolution: int, base: int = 64) -> "GaborBankConfig":
        """Wavelengths scaled proportionally from the 64-pixel defaults."""
        from dataclasses import replace
        f = resolution / base
        return replace(self, wavelengths=tuple(w * f for w in self.wavelengths))


@dataclass
class ROIMask:
    mask: np.ndarray
    valid: bool = True
    degenerate: bool = False

    @property
    def coverage(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def remove_background_artifacts(image: np.ndarray, threshold: float = 0.95) -> np.ndarray:
    """Replace near-white regions touching the image border with the background median.

    Bright regions that do not touch the border are left alone.
    """
    image = np.asarray(image, dtype=np.float64)
    bright = image > threshold
    if not bright.any():
        return image
    labels, n = ndimage.label(bright)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    border = border[border > 0]
    if border.size == 0:
        return image
    artifact = np.isin(labels, border)
    rest = image[~artifact]
    fill = float(np.median(rest)) if rest.size else 0.0
    out = image.copy()
    out[artifact] = fill
    return out


def gabor_kernel(wavelength: float, cfg: GaborBankConfig) -> np.ndarray:
    """Zero-mean, unit-L1 even Gabor kernel.

    The carrier varies along the rotated vertical axis, so orientation 0
    responds to horizontal bands.
    """
    sigma = cfg.sigma_ratio * wavelength
    half = int(np.ceil(cfg.kernel_size_factor * sigma))
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    c, s = np.cos(cfg.orientation), np.sin(cfg.orientation)
    u = yy * c - xx * s  # across the stripes
    v = yy * s + xx * c  # along the stripes
    env = np.exp(-(u**2 + (cfg.aspect * v) ** 2) / (2 * sigma**2))
    k = env * np.cos(2 * np.pi * u / wavelength)
    k -= env * (k.sum() / env.sum())
    return k / np.abs(k).sum()


def gabor_response(image: np.ndarray, cfg: GaborBankConfig | None = None) -> np.ndarray:
    """Max over the bank of rectified responses, normalized to [0, 1]."""
    cfg = cfg or GaborBankConfig()
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(image)
    for w in cfg.wavelengths:
        k = gabor_kernel(w, cfg)
        if k.shape[0] > image.shape[0] or k.shape[1] > image.shape[1]:
            raise ValueError(
                f"Gabor kernel for wavelength {w:g} is {k.shape[0]}x{k.shape[1]}, "
                f"larger than the {image.shape[0]}x{image.shape[1]} image")
        np.maximum(out, np.abs(ndimage.convolve(image, k, mode="reflect")), out=out)
    peak = out.max()
    # flat inputs leave only rounding residue
    if peak <= 1e-9:
        return np.zeros_like(image)
    return out / peak


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float | None:
    """Otsu's threshold on a [0,1] histogram; None if the values are constant.

    When several cut points tie for the maximum inter-class variance the
    middle of the tied run is used.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or v.max() - v.min() <= 1e-12:
        return None
    hist, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    p = hist / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    total = (p * centers).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total * w0 - m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    best = between.max()
    idx = np.flatnonzero(between >= best - 1e-12 * max(best, 1.0))
    # cut after bin i -> threshold at the upper edge of bin i
    cut = edges[1:-1]
    return float((cut[idx[0]] + cut[idx[-1]]) / 2)


def binarize(response: np.ndarray, method: str | float = "otsu") -> ROIMask:
    """Threshold a [0,1] response; ``method`` is "otsu" or a fixed float threshold."""
    response = np.asarray(response, dtype=np.float64)
    if isinstance(method, str) and method.startswith("fixed"):
        method = float(method[method.index("(") + 1:method.rindex(")")])
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown binarization method {method!r}")
        t = otsu_threshold(response)
        if t is None:
            return ROIMask(np.zeros(response.shape, bool), valid=False, degenerate=True)
    else:
        t = float(method)
        if response.max() - response.min() <= 1e-12 and not (response >= t).any():
            return ROIMask(np.zeros(response.shape, bool), valid=False, degenerate=True)
    return ROIMask(response >= t)


def cleanup(mask: np.ndarray, cfg: GaborBankConfig | None = None, max_iter: int = 10) -> np.ndarray:
    """Close, open, drop small components; repeated until it reaches a fixed point."""
    cfg = cfg or GaborBankConfig()
    close_el = np.ones(cfg.close_size, bool)
    open_el = np.ones(cfg.open_size, bool)
    min_area = cfg.min_area_fraction * mask.size
    m = np.asarray(mask, bool)
    for _ in range(max_iter):
        nxt = ndimage.binary_closing(np.pad(m, [(s, s) for s in cfg.close_size]), close_el)
        nxt = nxt[cfg.close_size[0]:-cfg.close_size[0], cfg.close_size[1]:-cfg.close_size[1]]
        nxt = ndimage.binary_fill_holes(nxt)
        nxt = ndimage.binary_opening(nxt, open_el)
        labels, n = ndimage.label(nxt)
        if n:
            areas = ndimage.sum_labels(nxt, labels, index=np.arange(1, n + 1))
            keep = np.concatenate([[False], areas >= min_area])
            nxt = keep[labels]
        if np.array_equal(nxt, m):
            break
        m = nxt
    return m


def extract_roi(image: np.ndarray, cfg: GaborBankConfig | None = None) -> ROIMask:
    """Background removal, Gabor bank, binarization and cleanup.

    ``valid`` is False when the result is degenerate or its coverage falls
    outside ``[cfg.min_coverage, cfg.max_coverage]``; callers skip the sample.
    """
    cfg = cfg or GaborBankConfig()
    clean = remove_background_artifacts(image, cfg.artifact_threshold)
    raw = binarize(gabor_response(clean, cfg), cfg.binarize)
    if raw.degenerate:
        return raw
    mask = cleanup(raw.mask, cfg)
    cov = float(mask.mean())
    return ROIMask(mask, valid=cfg.min_coverage <= cov <= cfg.max_coverage)


def band_recall_leak(mask: np.ndarray, band: np.ndarray) -> tuple[float, float]:
    """(fraction of band pixels covered, fraction of background pixels covered)."""
    band = np.asarray(band, bool)
    mask = np.asarray(mask, bool)
    recall = (mask & band).sum() / max(band.sum(), 1)
    leak = (mask & ~band).sum() / max((~band).sum(), 1)
    return float(recall), float(leak)


def parse_wavelengths(text: str | Sequence[float]) -> tuple[float, ...]:
    if isinstance(text, str):
        return tuple(float(t) for t in text.replace(" ", "").split(",") if t)
    return tuple(float(t) for t in text)
