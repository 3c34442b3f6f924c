"""Training loop for the retina-aware VQGAN.

Batches and all data-side randomness are pure functions of ``(seed, step)``:
epoch ``e`` visits the permutation drawn from stream ``("epoch", e)`` and the
triplet for batch slot ``i`` at step ``s`` draws from ``("triplet", s, i)``.
Resuming therefore needs only the step counter plus network and optimizer
state, and results do not depend on how many workers assemble triplets.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import DatasetIndex, TripletSample, assemble_triplet
from .losses import LossWeights, PerceptualDistance, gan_losses, l1_loss, roi_loss, total_loss, triplet_loss, vq_loss
from .model import ModelConfig, PatchDiscriminator, VQModel, straight_through
from .perturb import PerturbConfig
from .roi import GaborBankConfig, ROIMask, extract_roi
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

ABLATIONS = ("recon_only", "recon_triplet", "full")
POSITIVE_MODES = ("inter_patient", "intra_patient")
RECONSTRUCT = ("all", "anchor")
CHECKPOINT_FORMAT = "octvq-checkpoint/1"
LOG_COLUMNS = ("step", "l_roi", "l_perc", "l_vq", "l_triplet", "l_gan_g", "l_gan_d", "total")


class TrainingError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-4
    batch_size: int = 8
    warmup_steps: int = 200
    seed: int = 0
    positive_mode: str = "inter_patient"
    ablation: str = "full"
    reconstruct: str = "all"
    checkpoint_every: int = 0  # steps; 0 = once per epoch
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    roi: GaborBankConfig = field(default_factory=GaborBankConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.positive_mode not in POSITIVE_MODES:
            raise ValueError(f"positive_mode must be one of {POSITIVE_MODES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.reconstruct not in RECONSTRUCT:
            raise ValueError(f"reconstruct must be one of {RECONSTRUCT}")


def desk_preset(**overrides) -> TrainConfig:
    return dataclasses.replace(TrainConfig(), **overrides)


def paper_preset(**overrides) -> TrainConfig:
    from .model import PRESETS
    cfg = TrainConfig(epochs=28, learning_rate=1e-6, batch_size=16, warmup_steps=10_000,
                      model=dataclasses.replace(PRESETS["paper"]),
                      roi=GaborBankConfig().scaled(256))
    return dataclasses.replace(cfg, **overrides)


TRAIN_PRESETS: dict[str, Callable[..., TrainConfig]] = {"desk": desk_preset, "paper": paper_preset}


@dataclass
class StepRecord:
    """Which image each reconstruction pass used as input and as target."""

    role: str
    input: object
    target: object


class Trainer:
    """Owns the generator, discriminator, optimizers and step counter."""

    def __init__(self, cfg: TrainConfig, index: DatasetIndex):
        index.check_training()
        if len(index) == 0:
            raise TrainingError("training split is empty")
        self.cfg = cfg
        self.index = index
        torch.manual_seed(derive_seed(cfg.seed, "torch-init"))
        self.model = VQModel(cfg.model)
        self.disc = PatchDiscriminator(cfg.model)
        self.perc = PerceptualDistance()
        betas = (0.5, 0.9)
        self.g_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate, betas=betas)
        self.d_opt = torch.optim.Adam(self.disc.parameters(), lr=cfg.learning_rate, betas=betas)
        self.step = 0
        self.history: list[dict] = []
        self._roi_cache: dict[int, ROIMask] = {}
        self.target_log: Optional[list[StepRecord]] = None

    # -- data ------------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.index) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = derive_rng(self.cfg.seed, "epoch", epoch).permutation(len(self.index))
        b = self.cfg.batch_size
        return perm[pos * b:(pos + 1) * b]

    def roi_for(self, i: int) -> ROIMask:
        if i not in self._roi_cache:
            self._roi_cache[i] = extract_roi(self.index[i].pixels, self.cfg.roi)
        return self._roi_cache[i]

    def _triplet(self, slot: int, i: int) -> Optional[TripletSample]:
        rng = derive_rng(self.cfg.seed, "triplet", self.step, slot)
        anchor = self.index[i]
        return assemble_triplet(anchor, self.index, self.cfg.positive_mode, rng,
                                perturb_cfg=self.cfg.perturb, roi=self.roi_for(i))

    def build_triplets(self, indices) -> list[TripletSample]:
        jobs = list(enumerate(indices))
        if self.cfg.workers > 1:
            for _, i in jobs:  # fill the ROI cache before fanning out
                self.roi_for(int(i))
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                out = list(pool.map(lambda job: self._triplet(job[0], int(job[1])), jobs))
        else:
            out = [self._triplet(slot, int(i)) for slot, i in jobs]
        return [t for t in out if t is not None]

    # -- one update -----------------------------------------------------
    def _plan(self, indices) -> tuple[list[StepRecord], list[np.ndarray], Optional[list[TripletSample]]]:
        """(input, target) pairs for this step plus the ROI used for each target."""
        if self.cfg.ablation == "recon_only":
            anchors = [self.index[int(i)] for i in indices]
            pairs = [StepRecord("anchor", a, a) for a in anchors]
            return pairs, [np.zeros_like(a.pixels, bool) for a in anchors], None
        triplets = self.build_triplets(indices)
        if not triplets:
            raise TrainingError(f"step {self.step + 1}: ROI extraction failed for every anchor in the batch")
        pairs, rois = [], []
        roles = ("anchor", "positive", "negative") if self.cfg.reconstruct == "all" else ("anchor",)
        for role in roles:
            for t in triplets:
                inp = getattr(t, role)
                target = t.targets[role]
                pairs.append(StepRecord(role, inp, target))
                if target is t.anchor:
                    rois.append(t.roi.mask)
                else:
                    rois.append(self.roi_for(self.index.position(target)).mask)
        return pairs, rois, triplets

    def _tensor(self, arrays) -> torch.Tensor:
        dtype = self.model.codebook.dtype
        return torch.from_numpy(np.stack(arrays).astype(np.float64)).to(dtype)[:, None]

    def train_step(self, indices=None) -> dict:
        """One generator update (and one discriminator update once the gate opens)."""
        if indices is None:
            indices = self.batch_indices(self.step)
        if len(indices) == 0:
            raise TrainingError("empty batch")
        current = self.step + 1
        cfg, w = self.cfg, self.cfg.weights
        pairs, rois, triplets = self._plan(indices)
        if self.target_log is not None:
            self.target_log.extend(pairs)

        x = self._tensor([p.input.pixels for p in pairs])
        t = self._tensor([p.target.pixels for p in pairs])
        roi = self._tensor(rois)

        self.model.train()
        if not bool(self.model.codebook_initialized):
            gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "codebook-init"))
            with torch.no_grad():
                self.model.init_codebook_from(self.model.encode(x), gen)

        z_e = self.model.encode(x)
        q = self.model.quantize(z_e)
        x_hat = self.model.decode(straight_through(z_e, q.vectors))
        self.model.count_usage(q.indices)

        parts: dict[str, torch.Tensor] = {}
        if cfg.ablation == "full":
            parts["pixel"] = roi_loss(t, x_hat, roi, w.alpha_roi)
        else:
            parts["pixel"] = l1_loss(t, x_hat)
        parts["perc"] = self.perc(t, x_hat)
        parts["vq"] = vq_loss(z_e, q.vectors, w.beta_commit)

        zero = torch.zeros((), dtype=x.dtype)
        parts["triplet"] = zero
        if triplets is not None and cfg.ablation != "recon_only":
            n = len(triplets)
            if cfg.reconstruct == "all":
                f = z_e.mean(dim=(2, 3))
                fa, fp, fn = f[:n], f[n:2 * n], f[2 * n:]
            else:
                fa = z_e.mean(dim=(2, 3))
                fp = self.model.embed(self._tensor([tr.positive.pixels for tr in triplets]))
                fn = self.model.embed(self._tensor([tr.negative.pixels for tr in triplets]))
            parts["triplet"] = triplet_loss(fa, fp, fn, w.margin)

        gan_open = cfg.ablation == "full" and current > cfg.warmup_steps
        parts["gan"] = zero
        if gan_open:
            parts["gan"] = gan_losses(self.disc(t), self.disc(x_hat))["generator_loss"]

        total = total_loss(parts, w)
        self.g_opt.zero_grad(set_to_none=True)
        total.backward()
        self.g_opt.step()

        d_loss = zero
        if gan_open:
            self.d_opt.zero_grad(set_to_none=True)
            d_loss = gan_losses(self.disc(t), self.disc(x_hat.detach()))["discriminator_loss"]
            d_loss.backward()
            self.d_opt.step()

        self.step = current
        if cfg.model.dead_code_reseed and self.step % self.steps_per_epoch == 0:
            gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "reseed", self.step))
            n_dead = self.model.reseed_dead_codes(z_e, gen)
            if n_dead:
                log.info("step %d: re-seeded %d dead codebook entries", self.step, n_dead)

        rec = {
            "step": self.step,
            "l_roi": parts["pixel"].item(),
            "l_perc": parts["perc"].item(),
            "l_vq": parts["vq"].item(),
            "l_triplet": parts["triplet"].item(),
            "l_gan_g": parts["gan"].item(),
            "l_gan_d": d_loss.item(),
            "total": total.item(),
        }
        self.history.append(rec)
        return rec

    # -- persistence ----------------------------------------------------
    def state_dict(self) -> dict:
        from .config import train_config_to_flat
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": _config_dict(self.cfg.model),
            "train_config": train_config_to_flat(self.cfg),
            "step": self.step,
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "history": list(self.history),
        }

    def load_state_dict(self, payload: dict) -> None:
        if payload["model_config"] != _config_dict(self.cfg.model):
            raise CheckpointError("checkpoint ModelConfig does not match the trainer's ModelConfig")
        self.model.load_state_dict(payload["model"])
        self.disc.load_state_dict(payload["disc"])
        self.g_opt.load_state_dict(payload["g_opt"])
        self.d_opt.load_state_dict(payload["d_opt"])
        self.step = int(payload["step"])
        self.history = list(payload["history"])

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self, path)


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(trainer.state_dict(), tmp)
    tmp.replace(path)
    return path


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept ``runs/r1/final`` for ``runs/r1/final.ckpt``."""
    p = Path(path)
    if not p.exists() and p.with_name(p.name + ".ckpt").exists():
        return p.with_name(p.name + ".ckpt")
    return p


def load_checkpoint(path: str | Path, expect_model: Optional[ModelConfig] = None) -> dict:
    """Read and validate a checkpoint payload; raises CheckpointError on any problem."""
    p = resolve_checkpoint(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {p}: {exc}") from None
    if not isinstance(payload, dict) or "format" not in payload:
        raise CheckpointError(f"{p} is not an octvq checkpoint")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{p} has format {payload['format']!r}; this version reads {CHECKPOINT_FORMAT!r}")
    if expect_model is not None and payload["model_config"] != _config_dict(expect_model):
        raise CheckpointError(f"{p} was trained with a different ModelConfig")
    return payload


def model_config_from(payload: dict) -> ModelConfig:
    d = dict(payload["model_config"])
    d["channels"] = tuple(d["channels"])
    return ModelConfig(**d)


def load_model(path: str | Path) -> VQModel:
    """Generator only, in eval mode, for scoring and localization."""
    payload = load_checkpoint(path)
    model = VQModel(model_config_from(payload))
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def resume_trainer(path: str | Path, index: DatasetIndex, cfg: Optional[TrainConfig] = None) -> Trainer:
    from .config import train_config_from_flat
    payload = load_checkpoint(path)
    cfg = cfg or train_config_from_flat(payload["train_config"])
    trainer = Trainer(cfg, index)
    trainer.load_state_dict(payload)
    return trainer


def _finite(rec: dict) -> bool:
    return all(math.isfinite(v) for k, v in rec.items() if k != "step")


def fit(index: DatasetIndex, cfg: TrainConfig, out_dir: str | Path, max_steps: Optional[int] = None,
        resume: Optional[str | Path] = None, trainer: Optional[Trainer] = None) -> Path:
    """Train for ``cfg.epochs`` epochs (or ``max_steps``); returns the final checkpoint path.

    Writes ``loss_log.tsv`` (one line per step), periodic ``step_XXXXXX.ckpt``
    files and ``final.ckpt`` under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if trainer is None:
        trainer = resume_trainer(resume, index, cfg) if resume else Trainer(cfg, index)
    end = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    every = cfg.checkpoint_every or trainer.steps_per_epoch

    log_path = out / "loss_log.tsv"
    if not log_path.exists() or trainer.step == 0:
        log_path.write_text("\t".join(LOG_COLUMNS) + "\n")
    last_ok: Optional[dict] = trainer.history[-1] if trainer.history else None
    with open(log_path, "a") as fh:
        while trainer.step < end:
            rec = trainer.train_step()
            if not _finite(rec):
                raise TrainingError(f"non-finite loss at step {rec['step']}; last finite breakdown: {last_ok}")
            last_ok = rec
            fh.write("\t".join(str(rec["step"]) if k == "step" else f"{rec[k]:.8g}" for k in LOG_COLUMNS) + "\n")
            fh.flush()
            if trainer.step % every == 0 and trainer.step < end:
                save_checkpoint(trainer, out / f"step_{trainer.step:06d}.ckpt")
            if trainer.step % trainer.steps_per_epoch == 0:
                log.info("epoch %d done, step %d, total %.4f", trainer.step // trainer.steps_per_epoch,
                         trainer.step, rec["total"])
    return save_checkpoint(trainer, out / "final.ckpt")
