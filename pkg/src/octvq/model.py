"""Convolutional VQ autoencoder with a patch discriminator.

Tensors are channels-first: images ``(N, 1, H, W)``, latent grids
``(N, d, H', W')``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    input_resolution: int = 64
    codebook_size: int = 32
    codebook_dim: int = 16
    downsample_factor: int = 4
    channels: tuple[int, ...] = (16, 32, 32)
    disc_channels: int = 16
    disc_downsample: int = 8
    dead_code_reseed: bool = False

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("downsample_factor must be a power of two")
        if self.input_resolution % f:
            raise ValueError(f"input_resolution {self.input_resolution} not divisible by downsample_factor {f}")
        if len(self.channels) != self.n_down + 1:
            raise ValueError(f"channels needs {self.n_down + 1} entries for downsample_factor {f}")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.codebook_dim < 1:
            raise ValueError("codebook_dim must be >= 1")
        d = self.disc_downsample
        if d < 2 or d & (d - 1) or self.input_resolution % d:
            raise ValueError("disc_downsample must be a power of two dividing input_resolution")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def latent_size(self) -> int:
        return self.input_resolution // self.downsample_factor


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(input_resolution=256, codebook_size=256, codebook_dim=256, downsample_factor=16,
                         channels=(64, 128, 128, 256, 256), disc_channels=64, disc_downsample=8),
}


class QuantizedLatent(NamedTuple):
    indices: torch.Tensor  # (N, H', W') int64
    vectors: torch.Tensor  # (N, d, H', W'), exactly codebook rows


def _groups(c: int) -> int:
    return math.gcd(c, 8)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
            nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        layers: list[nn.Module] = [nn.Conv2d(1, ch[0], 3, padding=1)]
        for i in range(cfg.n_down):
            layers += [ResBlock(ch[i]), nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1)]
        layers += [ResBlock(ch[-1]), nn.GroupNorm(_groups(ch[-1]), ch[-1]), nn.SiLU(),
                   nn.Conv2d(ch[-1], cfg.codebook_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        layers: list[nn.Module] = [nn.Conv2d(cfg.codebook_dim, ch[-1], 3, padding=1), ResBlock(ch[-1])]
        for i in reversed(range(cfg.n_down)):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch[i + 1], ch[i], 3, padding=1), ResBlock(ch[i])]
        layers += [nn.GroupNorm(_groups(ch[0]), ch[0]), nn.SiLU(), nn.Conv2d(ch[0], 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class PatchDiscriminator(nn.Module):
    """Strided conv stack; each output logit judges one receptive-field patch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = int(math.log2(cfg.disc_downsample))
        c = cfg.disc_channels
        layers: list[nn.Module] = []
        cin = 1
        for i in range(n):
            cout = c * min(2**i, 4)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers += [nn.Conv2d(cin, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        _check_image(x, self.cfg)
        return self.net(x)[:, 0]


def _check_image(x: torch.Tensor, cfg: ModelConfig) -> None:
    r = cfg.input_resolution
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != r or x.shape[3] != r:
        raise ValueError(f"expected images of shape (N, 1, {r}, {r}), got {tuple(x.shape)}")


def nearest_indices(flat: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest codebook row for each row of ``flat`` (ties -> lowest index)."""
    out = []
    for start in range(0, flat.shape[0], chunk):
        z = flat[start:start + chunk]
        dist = ((z[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        # torch.argmin returns the first minimal index
        out.append(dist.argmin(dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(out)


def quantize(grid: torch.Tensor, codebook: torch.Tensor) -> QuantizedLatent:
    """Replace every latent vector with its nearest codebook entry (Euclidean)."""
    if grid.ndim != 4:
        raise ValueError(f"latent grid must be (N, d, H', W'), got {tuple(grid.shape)}")
    n, d, h, w = grid.shape
    if codebook.ndim != 2 or codebook.shape[1] != d:
        raise ValueError(f"latent depth {d} does not match codebook dimension {codebook.shape[-1]}")
    flat = grid.detach().permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_indices(flat, codebook.detach()).view(n, h, w)
    vectors = F.embedding(idx, codebook).permute(0, 3, 1, 2)
    return QuantizedLatent(idx, vectors)


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value exactly z_q; backward identity to z_e (nothing flows to z_q)."""
    return z_q.detach() + (z_e - z_e.detach())


class VQModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        m, d = self.cfg.codebook_size, self.cfg.codebook_dim
        self.codebook = nn.Parameter(torch.empty(m, d).uniform_(-1.0 / m, 1.0 / m))
        self.register_buffer("usage", torch.zeros(m, dtype=torch.long))
        self.register_buffer("codebook_initialized", torch.zeros((), dtype=torch.bool))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.cfg)
        return self.encoder(x)

    def quantize(self, z_e: torch.Tensor) -> QuantizedLatent:
        return quantize(z_e, self.codebook)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        s, d = self.cfg.latent_size, self.cfg.codebook_dim
        if z_q.ndim != 4 or z_q.shape[1:] != (d, s, s):
            raise ValueError(f"expected quantized grid (N, {d}, {s}, {s}), got {tuple(z_q.shape)}")
        return self.decoder(z_q)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Triplet embedding: spatial mean of the pre-quantization latent, (N, d)."""
        return self.encode(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> dict:
        z_e = self.encode(x)
        q = self.quantize(z_e)
        x_hat = self.decode(straight_through(z_e, q.vectors))
        return {"z_e": z_e, "z_q": q.vectors, "indices": q.indices, "x_hat": x_hat}

    @torch.no_grad()
    def reconstruct(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Numpy in, numpy out: ``(N, H, W)`` or ``(H, W)`` images in [0, 1]."""
        arr = np.asarray(images, dtype=np.float32)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        was_training = self.training
        self.eval()
        outs = []
        dtype = self.codebook.dtype
        for start in range(0, len(arr), batch_size):
            x = torch.from_numpy(arr[start:start + batch_size]).to(dtype)[:, None]
            z_e = self.encode(x)
            outs.append(self.decode(self.quantize(z_e).vectors)[:, 0].double().numpy())
        self.train(was_training)
        out = np.concatenate(outs) if outs else np.zeros((0,) + arr.shape[1:])
        return out[0] if single else out

    def count_usage(self, indices: torch.Tensor) -> torch.Tensor:
        counts = torch.bincount(indices.reshape(-1), minlength=self.cfg.codebook_size)
        self.usage += counts
        return counts

    @torch.no_grad()
    def init_codebook_from(self, z_e: torch.Tensor, generator: torch.Generator) -> None:
        """Seed codebook rows with randomly chosen encoder outputs."""
        flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, self.cfg.codebook_dim)
        m = self.cfg.codebook_size
        pick = torch.randint(0, flat.shape[0], (m,), generator=generator)
        noise = torch.randn(m, self.cfg.codebook_dim, generator=generator, dtype=flat.dtype) * 1e-3
        self.codebook.copy_(flat[pick] + noise)
        self.codebook_initialized.fill_(True)

    @torch.no_grad()
    def reseed_dead_codes(self, z_e: torch.Tensor, generator: torch.Generator) -> int:
        dead = torch.nonzero(self.usage == 0).flatten()
        if dead.numel():
            flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, self.cfg.codebook_dim)
            pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=generator)
            self.codebook[dead] = flat[pick]
        self.usage.zero_()
        return int(dead.numel())
