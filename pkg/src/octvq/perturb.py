"""Structural perturbations confined to the retinal ROI (negative samples)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MODES = ("deform", "fluid", "both")
EDGE_TAPER = 2.0  # pixels
LESION_DELTA = 0.05


class PerturbationError(Exception):
    pass


@dataclass
class PerturbConfig:
    deform_amplitude_range: tuple[float, float] = (2.0, 6.0)
    deform_wavelength_range: tuple[float, float] = (16.0, 48.0)
    thicken_factor_range: tuple[float, float] = (1.1, 1.5)
    fluid_count_range: tuple[int, int] = (1, 3)
    fluid_radius_range: tuple[float, float] = (3.0, 10.0)
    fluid_darkness_range: tuple[float, float] = (0.4, 0.9)
    mode_probabilities: tuple[float, float, float] = (0.4, 0.4, 0.2)
    max_retries: int = 5

    def __post_init__(self) -> None:
        for name in ("deform_amplitude_range", "deform_wavelength_range", "thicken_factor_range",
                     "fluid_count_range", "fluid_radius_range", "fluid_darkness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} exceeds max {hi}")
        lo, hi = self.fluid_darkness_range
        if lo < 0 or hi > 1:
            raise ValueError("fluid_darkness_range must lie in [0, 1]")
        if self.fluid_count_range[0] < 0:
            raise ValueError("fluid_count_range must be non-negative")
        p = np.asarray(self.mode_probabilities, dtype=np.float64)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("mode_probabilities must be three non-negative numbers summing to 1")
        self.mode_probabilities = tuple(float(v) for v in p)


def _bump(x: np.ndarray, center: float, width: float) -> np.ndarray:
    """Raised-cosine window: 1 at ``center``, 0 with zero slope at ``center ± width/2``."""
    t = np.clip((x - center) / (width / 2), -1.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _check_roi(image: np.ndarray, roi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != image.shape:
        raise ValueError(f"ROI shape {roi.shape} does not match image shape {image.shape}")
    if not roi.any():
        raise PerturbationError("ROI is empty; nothing to perturb")
    return image, roi


def _draw_deform(cfg: PerturbConfig, roi: np.ndarray, rng: np.random.Generator) -> dict:
    w = roi.shape[1]
    return {
        "amplitude": float(rng.uniform(*cfg.deform_amplitude_range) * rng.choice([-1.0, 1.0])),
        "wavelength": float(rng.uniform(*cfg.deform_wavelength_range)),
        "thicken": float(rng.uniform(*cfg.thicken_factor_range)),
        "center_col": float(rng.uniform(0, w - 1)),
    }


def _apply_deform(image: np.ndarray, roi: np.ndarray, p: dict) -> tuple[np.ndarray, np.ndarray]:
    h, w = image.shape
    rows = np.flatnonzero(roi.any(axis=1))
    r0, r1 = rows[0], rows[-1]
    bump = _bump(np.arange(w, dtype=np.float64), p["center_col"], p["wavelength"])
    shift = p["amplitude"] * bump  # downward displacement per column
    stretch = 1.0 + (p["thicken"] - 1.0) * bump
    if not np.any(shift) and np.all(stretch == 1.0):
        return image.copy(), np.zeros_like(roi)
    # per-column band centre = middle of the ROI rows in that column (fallback: bbox centre)
    counts = roi.sum(axis=0)
    ys = np.arange(h, dtype=np.float64)[:, None]
    centre = np.where(counts > 0, (roi * ys).sum(axis=0) / np.maximum(counts, 1), (r0 + r1) / 2)
    yy = np.broadcast_to(ys, (h, w))
    src_y = centre + (yy - centre - shift) / stretch
    src_x = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    warped = ndimage.map_coordinates(image, [src_y, src_x], order=1, mode="nearest")
    out = np.where(roi, warped, image)
    lesion = roi & (bump > 0) & (np.abs(out - image) > LESION_DELTA)
    return out, lesion


def deform_layers(image, roi, cfg: PerturbConfig | None = None, rng=None) -> np.ndarray:
    """Smooth vertical displacement plus local thickening inside the ROI rows."""
    image, roi = _check_roi(image, roi)
    cfg = cfg or PerturbConfig()
    rng = rng if rng is not None else np.random.default_rng()
    return _apply_deform(image, roi, _draw_deform(cfg, roi, rng))[0]


def _draw_fluid(cfg: PerturbConfig, roi: np.ndarray, rng: np.random.Generator) -> list[dict]:
    lo, hi = cfg.fluid_count_range
    k = int(rng.integers(lo, hi + 1))
    ry_, rx_ = np.nonzero(roi)
    blobs = []
    for _ in range(k):
        j = int(rng.integers(len(ry_)))
        blobs.append({
            "center": (float(ry_[j]), float(rx_[j])),
            "radii": (float(rng.uniform(*cfg.fluid_radius_range)),
                      float(rng.uniform(*cfg.fluid_radius_range))),
            "darkness": float(rng.uniform(*cfg.fluid_darkness_range)),
        })
    return blobs


def fluid_weight(shape: tuple[int, int], center, radii) -> np.ndarray:
    """Ellipse indicator with a cosine-tapered rim ``EDGE_TAPER`` pixels wide (1 in the core)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ry, rx = max(radii[0], 0.5), max(radii[1], 0.5)
    r = np.sqrt(((yy - center[0]) / ry) ** 2 + ((xx - center[1]) / rx) ** 2)
    depth = (1.0 - r) * min(ry, rx)  # approx. distance inside the rim, in pixels
    t = np.clip(depth / EDGE_TAPER, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def _apply_fluid(image: np.ndarray, roi: np.ndarray, blobs: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    gain = np.ones_like(image)
    lesion = np.zeros_like(roi)
    for b in blobs:
        wgt = fluid_weight(image.shape, b["center"], b["radii"])
        gain *= 1.0 - b["darkness"] * wgt
        lesion |= wgt >= 0.5
    out = np.where(roi, image * gain, image)
    return out, lesion & roi


def insert_fluid_regions(image, roi, cfg: PerturbConfig | None = None, rng=None) -> np.ndarray:
    """Darken ``k`` tapered ellipses centred on ROI pixels."""
    image, roi = _check_roi(image, roi)
    cfg = cfg or PerturbConfig()
    rng = rng if rng is not None else np.random.default_rng()
    return _apply_fluid(image, roi, _draw_fluid(cfg, roi, rng))[0]


def perturb_with_info(image, roi, cfg: PerturbConfig | None = None, rng=None) -> tuple[np.ndarray, dict]:
    """Perturb and also return the drawn parameters and a lesion mask.

    The lesion mask marks fluid-ellipse cores and the ROI pixels a
    deformation visibly moved (|change| > LESION_DELTA).
    """
    image, roi = _check_roi(image, roi)
    cfg = cfg or PerturbConfig()
    rng = rng if rng is not None else np.random.default_rng()
    for attempt in range(cfg.max_retries):
        mode = MODES[int(rng.choice(3, p=cfg.mode_probabilities))]
        out = image
        lesion = np.zeros_like(roi)
        info: dict = {"mode": mode, "attempt": attempt}
        if mode in ("deform", "both"):
            info["deform"] = _draw_deform(cfg, roi, rng)
            out, les = _apply_deform(out, roi, info["deform"])
            lesion |= les
        if mode in ("fluid", "both"):
            info["fluid"] = _draw_fluid(cfg, roi, rng)
            out, les = _apply_fluid(out, roi, info["fluid"])
            lesion |= les
        if np.any(out != image):
            info["lesion_mask"] = lesion
            return out, info
    raise PerturbationError(
        f"{cfg.max_retries} consecutive perturbation draws left the image unchanged; check the config ranges")


def perturb(image, roi, cfg: PerturbConfig | None = None, rng=None) -> np.ndarray:
    return perturb_with_info(image, roi, cfg, rng)[0]
