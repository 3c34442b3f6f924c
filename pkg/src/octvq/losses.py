"""Objective terms for retina-aware VQGAN training.

All losses are means over pixels / latent positions, so their values do not
depend on resolution.  They accept any floating dtype; the gradient checks
run them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

TERMS = ("pixel", "perc", "vq", "triplet", "gan")


@dataclass
class LossWeights:
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    lambda_vq: float = 1.0
    lambda_triplet: float = 1.0
    lambda_gan: float = 0.8
    beta_commit: float = 0.25
    alpha_roi: float = 6.0
    margin: float = 1.0

    def __post_init__(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    def for_term(self, term: str) -> float:
        return {
            "pixel": self.lambda_l1,
            "perc": self.lambda_perc,
            "vq": self.lambda_vq,
            "triplet": self.lambda_triplet,
            "gan": self.lambda_gan,
        }[term]


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(x_t: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _same_shape(x_t, x_hat, "l1_loss")
    return (x_t - x_hat).abs().mean()


def rec_loss(x_t: torch.Tensor, x_hat: torch.Tensor, w: LossWeights | None = None,
             perc: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None) -> torch.Tensor:
    """λ₁·mean|x_t − x̂| + λ_perc·perc(x_t, x̂)."""
    w = w or LossWeights()
    out = w.lambda_l1 * l1_loss(x_t, x_hat)
    if perc is not None and w.lambda_perc:
        out = out + w.lambda_perc * perc(x_t, x_hat)
    return out


def vq_loss(z_e: torch.Tensor, z_q: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Codebook term (moves z_q only) plus β-weighted commitment term (moves z_e only)."""
    _same_shape(z_e, z_q, "vq_loss")
    codebook = ((z_e.detach() - z_q) ** 2).mean()
    commit = ((z_e - z_q.detach()) ** 2).mean()
    return codebook + beta * commit


def roi_loss(x: torch.Tensor, x_hat: torch.Tensor, roi: torch.Tensor, alpha: float = 6.0) -> torch.Tensor:
    """(1/N) Σ (1 + α·ROIᵢ)(xᵢ − x̂ᵢ)²."""
    _same_shape(x, x_hat, "roi_loss")
    roi = roi.to(x.dtype)
    if roi.shape != x.shape:
        roi = roi.expand_as(x)
    return ((1.0 + alpha * roi) * (x - x_hat) ** 2).mean()


def triplet_loss(fa: torch.Tensor, fp: torch.Tensor, fn: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """max(‖fa−fp‖² − ‖fa−fn‖² + margin, 0), averaged over a leading batch axis if present."""
    _same_shape(fa, fp, "triplet_loss")
    _same_shape(fa, fn, "triplet_loss")
    d_pos = ((fa - fp) ** 2).sum(-1)
    d_neg = ((fa - fn) ** 2).sum(-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def gan_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> dict[str, torch.Tensor]:
    """Discriminator loss and non-saturating generator loss from patch logits.

    log σ(z) and log(1 − σ(z)) = log σ(−z) go through ``logsigmoid`` so
    large-magnitude logits stay finite.
    """
    _same_shape(real_logits, fake_logits, "gan_losses")
    d_loss = -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()
    g_loss = -F.logsigmoid(fake_logits).mean()
    return {"discriminator_loss": d_loss, "generator_loss": g_loss}


def total_loss(parts: Mapping[str, torch.Tensor | float], w: LossWeights | None = None):
    """Σ λ_term · part over the terms present in ``parts``.

    ``pixel`` (alias ``roi``) is the ROI-weighted squared error (full model)
    or the plain ℓ₁ term (ablations); missing terms count as zero.
    """
    w = w or LossWeights()
    if "roi" in parts:
        if "pixel" in parts:
            raise ValueError("give the pixel term as 'pixel' or 'roi', not both")
        parts = {("pixel" if k == "roi" else k): v for k, v in parts.items()}
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    out = 0.0
    for term in TERMS:
        if term in parts:
            out = out + w.for_term(term) * parts[term]
    return out


class PerceptualDistance(nn.Module):
    """LPIPS-style distance over a frozen, randomly initialised conv stack.

    Features are unit-normalised across channels at each position; the
    distance is the sum over layers of the mean squared feature difference.
    The stack is seeded independently of any training seed, so the function
    is fixed across runs.
    """

    def __init__(self, widths=(16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 1
        for i, c in enumerate(widths):
            conv = nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = c
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x * 2.0 - 1.0
        feats = []
        for conv in self.layers:
            h = F.leaky_relu(conv(h), 0.2)
            norm = torch.sqrt((h**2).sum(1, keepdim=True) + 1e-10)
            feats.append(h / norm)
        return feats

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        _same_shape(x, y, "perceptual_distance")
        self.to(x.dtype)
        fx, fy = self.features(x), self.features(y)
        return sum(((a - b) ** 2).sum(1).mean() for a, b in zip(fx, fy))
