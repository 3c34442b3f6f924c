"""Image-level anomaly scores, Youden-J thresholds and pixel-level localization maps."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from .roi import otsu_threshold

MAP_METRICS = ("weighted", "l1", "ssim", "mse")

# a VQModel, or any callable mapping (N, H, W) images to reconstructions
Reconstructor = Any


@dataclass
class AnomalyScore:
    value: float
    image_id: str = ""


@dataclass
class Threshold:
    t_star: float
    J: float
    fitted_on: str = ""


class PredictedMask(NamedTuple):
    mask: np.ndarray
    degenerate: bool


def reconstruct(model: Reconstructor, images: np.ndarray) -> np.ndarray:
    """Run anything with a ``reconstruct`` method, or a plain callable, on numpy images."""
    fn = getattr(model, "reconstruct", model)
    return np.asarray(fn(images), dtype=np.float64)


def _check_resolution(images: np.ndarray, model) -> None:
    cfg = getattr(model, "cfg", None)
    r = getattr(cfg, "input_resolution", None)
    if r is not None and images.shape[-2:] != (r, r):
        raise ValueError(f"image resolution {images.shape[-2:]} does not match model resolution ({r}, {r})")


def l1_scores(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return np.abs(x - x_hat).reshape(x.shape[0], -1).mean(axis=1) if x.ndim == 3 else np.abs(x - x_hat).mean()


def image_score(x: np.ndarray, model: Reconstructor, image_id: str = "") -> AnomalyScore:
    """Mean absolute residual between ``x`` and the model's reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    _check_resolution(x, model)
    return AnomalyScore(float(l1_scores(x, reconstruct(model, x))), image_id)


def score_images(images: np.ndarray, model: Reconstructor) -> tuple[np.ndarray, np.ndarray]:
    """Batch L1 scores; returns (scores, reconstructions)."""
    images = np.asarray(images, dtype=np.float64)
    _check_resolution(images, model)
    rec = reconstruct(model, images)
    return l1_scores(images, rec), rec


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03,
             sigma: float = 1.5, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with Gaussian-weighted local statistics (reflect padding)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if window % 2 == 0 or window < 1:
        raise ValueError("SSIM window must be a positive odd integer")
    if window > min(x.shape):
        raise ValueError(f"SSIM window {window} larger than image {x.shape}")
    g = gaussian_window(window, sigma)

    def blur(a):
        return ndimage.correlate1d(ndimage.correlate1d(a, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return np.clip(num / den, -1.0, 1.0)


def anomaly_map(x: np.ndarray, x_hat: np.ndarray, alpha: float = 0.6, beta: float = 0.4,
                metric: str = "weighted", **ssim_kw) -> np.ndarray:
    """Per-pixel discrepancy in [0, 1].

    ``weighted`` is α|x − x̂| + β(1 − SSIM), clamped to [0, 1]; ``l1``,
    ``ssim`` and ``mse`` are the single-term alternatives.  The pure SSIM map
    is (1 − SSIM)/2: the same ordering as 1 − SSIM, rescaled into [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if metric == "l1":
        return np.abs(x - x_hat)
    if metric == "mse":
        return (x - x_hat) ** 2
    if metric == "ssim":
        return (1.0 - ssim_map(x, x_hat, **ssim_kw)) / 2.0
    if metric != "weighted":
        raise ValueError(f"unknown map metric {metric!r}; expected one of {MAP_METRICS}")
    out = alpha * np.abs(x - x_hat)
    if beta:
        out = out + beta * (1.0 - ssim_map(x, x_hat, **ssim_kw))
    return np.clip(out, 0.0, 1.0)


def youden_curve(scores: np.ndarray, labels: np.ndarray):
    """Candidate thresholds (−∞, midpoints, +∞), their J values and class-gap widths."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    uniq = np.unique(scores)
    cand = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    gaps = np.concatenate([[0.0], np.diff(uniq), [0.0]])
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    # predicted positive <=> score > t
    tp = len(pos) - np.searchsorted(pos, cand, side="right")
    fp = len(neg) - np.searchsorted(neg, cand, side="right")
    j = tp / len(pos) - fp / len(neg)
    return cand, j, gaps


def select_threshold_youden(scores: Sequence[float], labels: Sequence[int], fitted_on: str = "") -> Threshold:
    """Threshold maximizing sensitivity + specificity − 1 (anomalous iff score > t*).

    Ties in J go to the widest gap between consecutive scores, then to the
    larger threshold.
    """
    labels = np.asarray(labels).astype(int)
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("threshold fitting requires both classes")
    cand, j, gaps = youden_curve(scores, labels)
    best = j.max()
    tied = np.flatnonzero(j == best)
    widest = tied[gaps[tied] == gaps[tied].max()]
    k = widest[-1]
    return Threshold(float(cand[k]), float(j[k]), fitted_on)


def classify(scores: Sequence[float], t_star: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) > t_star).astype(int)


def _parse_method(method) -> tuple[str, Optional[float]]:
    if isinstance(method, tuple):
        return method[0], float(method[1])
    m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", str(method))
    if m is None:
        raise ValueError(f"cannot parse binarization method {method!r}")
    name, arg = m.group(1), m.group(2)
    if name in ("otsu", "global_otsu"):
        return "global_otsu", None
    if name in ("percentile", "fixed"):
        if arg is None:
            raise ValueError(f"{name} needs an argument, e.g. {name}(0.5)")
        return name, float(arg)
    raise ValueError(f"unknown binarization method {method!r}")


def binarize_map(amap: np.ndarray, method="global_otsu", roi: Optional[np.ndarray] = None) -> PredictedMask:
    """Threshold an anomaly map; pixels outside ``roi`` are never predicted.

    ``global_otsu`` and ``fixed(t)`` mark values >= t; ``percentile(p)``
    marks values strictly above the p-th percentile.  Statistics are taken
    over ROI pixels when a ROI is given.
    """
    amap = np.asarray(amap, dtype=np.float64)
    inside = np.ones(amap.shape, bool) if roi is None else np.asarray(roi, bool)
    if inside.shape != amap.shape:
        raise ValueError("ROI shape does not match the map")
    vals = amap[inside]
    empty = PredictedMask(np.zeros(amap.shape, bool), True)
    if vals.size == 0:
        return empty
    name, arg = _parse_method(method)
    if name == "global_otsu":
        t = otsu_threshold(np.clip(vals, 0.0, 1.0))
        if t is None:
            return empty
        mask = amap >= t
    elif name == "percentile":
        if vals.max() - vals.min() <= 1e-12:
            return empty
        mask = amap > np.percentile(vals, arg)
    else:
        mask = amap >= arg
    return PredictedMask(mask & inside, False)
