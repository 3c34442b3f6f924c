"""B-scan datasets: ingestion, synthetic layered-retina phantoms, triplet assembly."""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .imageio import IMAGE_SUFFIXES, read_gray, resize_bilinear, write_gray8, write_mask
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

LABELS = ("normal", "abnormal", "unknown")
SPLITS = ("train", "val", "test")
MIN_SIDE = 32

# Kermany-style prefixes; anything else parses as "unknown".
_LABEL_TOKENS = {
    "NORMAL": "normal",
    "ABNORMAL": "abnormal",
    "CNV": "abnormal",
    "DME": "abnormal",
    "DRUSEN": "abnormal",
    "AMD": "abnormal",
}
_FILENAME_RE = re.compile(r"^(?P<label>[A-Za-z]+)-(?P<pid>[A-Za-z0-9_]+)-(?P<idx>\d+)$")
MANIFEST_NAME = "manifest.tsv"


class DatasetError(Exception):
    pass


class SamplingError(DatasetError):
    pass


@dataclass(eq=False)
class BScanImage:
    """One grayscale B-scan.

    ``band`` is only set for synthetic phantoms: the generator's own
    retinal-band mask, used as ground truth when checking ROI extraction.
    """

    pixels: np.ndarray
    patient_id: str
    label: str = "unknown"
    source_path: Optional[str] = None
    band: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"B-scan must be 2D, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"B-scan must be at least {MIN_SIDE}x{MIN_SIDE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("B-scan pixels must lie in [0, 1]")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        self.pixels = px

    @property
    def name(self) -> str:
        if self.source_path:
            return Path(self.source_path).stem
        return self.patient_id


@dataclass
class DatasetIndex:
    entries: list[BScanImage]
    split: str = "train"
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> BScanImage:
        return self.entries[i]

    @property
    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            out.setdefault(e.patient_id, []).append(i)
        return out

    def position(self, image: BScanImage) -> int:
        for i, e in enumerate(self.entries):
            if e is image:
                return i
        raise KeyError("image is not part of this index")

    def check_training(self) -> None:
        """Anomaly-detection training data must be normal-only."""
        bad = [e.name for e in self.entries if e.label == "abnormal"]
        if bad:
            raise DatasetError(f"training split contains {len(bad)} abnormal image(s), e.g. {bad[0]}")
        missing = [e.name for e in self.entries if not e.patient_id]
        if missing:
            raise DatasetError(f"training images need a patient id, e.g. {missing[0]}")


def parse_filename(name: str) -> tuple[str, str]:
    """``NORMAL-p17-003.png`` -> ("p17", "normal").  Raises ValueError otherwise."""
    m = _FILENAME_RE.match(Path(name).stem)
    if m is None:
        raise ValueError(f"filename {name!r} does not match <LABEL>-<patientid>-<index>")
    label = _LABEL_TOKENS.get(m.group("label").upper(), "unknown")
    return m.group("pid"), label


def _read_manifest(path: Path) -> dict[str, tuple[str, str]]:
    records = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected path<TAB>patient_id<TAB>label")
        rel, pid, label = (p.strip() for p in parts)
        label = label.lower()
        if label not in LABELS:
            label = _LABEL_TOKENS.get(label.upper(), "unknown")
        records[str(Path(rel))] = (pid, label)
    return records


def load_dataset(root: str | Path, split: str = "train", resolution: int = 64) -> DatasetIndex:
    """Load ``root/<split>/`` into memory, normalized to [0,1] and resized.

    Patient id and label come from the filename grammar unless
    ``root/<split>/manifest.tsv`` lists the file.  Unparseable files are
    skipped and recorded in ``index.skipped``.
    """
    return load_folder(Path(root) / split, resolution, split)


def load_folder(directory: str | Path, resolution: int = 64, split: str = "test") -> DatasetIndex:
    """Like :func:`load_dataset` for an arbitrary directory (``masks/`` subfolders are ignored)."""
    split_dir = Path(directory)
    if not split_dir.is_dir():
        raise DatasetError(f"dataset directory not found: {split_dir}")
    manifest_path = split_dir / MANIFEST_NAME
    manifest = _read_manifest(manifest_path) if manifest_path.exists() else {}

    entries: list[BScanImage] = []
    skipped: list[str] = []
    files = sorted(
        p for p in split_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and "masks" not in p.relative_to(split_dir).parts
    )
    for path in files:
        rel = str(path.relative_to(split_dir))
        try:
            if rel in manifest:
                pid, label = manifest[rel]
            else:
                pid, label = parse_filename(path.name)
        except ValueError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(rel)
            continue
        pixels = resize_bilinear(read_gray(path), resolution)
        entries.append(BScanImage(pixels, pid, label, source_path=str(path)))
    if skipped:
        log.warning("skipped %d file(s) in %s", len(skipped), split_dir)
    return DatasetIndex(entries, split, skipped)


@dataclass
class PhantomConfig:
    """Geometry and texture of synthetic layered-retina phantoms (sizes in pixels at ``size``)."""

    size: int = 64
    n_layers: int = 5
    band_thickness_range: tuple[float, float] = (0.30, 0.40)  # fraction of height
    band_center_range: tuple[float, float] = (0.40, 0.60)  # fraction of height
    layer_thickness_range: tuple[float, float] = (0.8, 1.4)  # Gaussian sigma of each layer
    layer_intensity_range: tuple[float, float] = (0.6, 0.95)
    tissue_intensity: float = 0.22
    background: float = 0.04
    curvature_amplitude: float = 2.0
    speckle_sigma: float = 0.2
    slices_per_patient: int = 1

    def __post_init__(self) -> None:
        if self.size < MIN_SIDE:
            raise ValueError(f"phantom size must be >= {MIN_SIDE}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.slices_per_patient < 1:
            raise ValueError("slices_per_patient must be >= 1")


def _phantom(cfg: PhantomConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.size
    y = np.arange(s, dtype=np.float64)[:, None]
    x = np.arange(s, dtype=np.float64)[None, :]

    thickness = rng.uniform(*cfg.band_thickness_range) * s
    center = rng.uniform(*cfg.band_center_range) * s
    amp = rng.uniform(0.0, cfg.curvature_amplitude)
    freq = rng.uniform(0.5, 1.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    shift = amp * np.cos(2 * np.pi * freq * x / s + phase)  # (1, W)
    top = center - thickness / 2 + shift

    sigmas = rng.uniform(*cfg.layer_thickness_range, size=cfg.n_layers)
    gains = rng.uniform(*cfg.layer_intensity_range, size=cfg.n_layers)
    if cfg.n_layers == 1:
        offsets = np.array([thickness / 2])
    else:
        offsets = np.linspace(0.0, thickness, cfg.n_layers)
        jitter = rng.uniform(-0.15, 0.15, size=cfg.n_layers) * thickness / (cfg.n_layers - 1)
        jitter[[0, -1]] = 0.0
        offsets = offsets + jitter

    upper = top + offsets[0] - 2 * sigmas[0]
    lower = top + offsets[-1] + 2 * sigmas[-1]
    band = (y >= upper) & (y <= lower)

    img = np.full((s, s), cfg.background)
    soft = 1.0 / (1.0 + np.exp(-(y - upper))) * 1.0 / (1.0 + np.exp(y - lower))
    img = img + (cfg.tissue_intensity - cfg.background) * soft
    for off, sig, gain in zip(offsets, sigmas, gains):
        img = img + gain * np.exp(-((y - (top + off)) ** 2) / (2 * sig**2))
    if cfg.speckle_sigma > 0:
        sg = cfg.speckle_sigma
        img = img * np.exp(sg * rng.standard_normal((s, s)) - sg**2 / 2)
    return np.clip(img, 0.0, 1.0), band


def generate_synthetic_dataset(cfg: PhantomConfig | None = None, n: int = 1, seed: int = 0,
                               split: str = "train", id_prefix: str = "s") -> DatasetIndex:
    """``n`` normal phantoms; a pure function of ``(cfg, n, seed)``.

    Patients get ids ``<prefix>0000``, ``<prefix>0001``, ...; with
    ``cfg.slices_per_patient > 1`` consecutive images share a patient.
    """
    cfg = cfg or PhantomConfig()
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    entries = []
    for i in range(n):
        rng = derive_rng(seed, "phantom", i)
        pixels, band = _phantom(cfg, rng)
        pid = f"{id_prefix}{i // cfg.slices_per_patient:04d}"
        entries.append(BScanImage(pixels, pid, "normal", band=band))
    return DatasetIndex(entries, split)


def write_dataset(index: DatasetIndex, root: str | Path,
                  masks: Optional[Sequence[Optional[np.ndarray]]] = None) -> list[Path]:
    """Write ``index`` under ``root/<split>/`` using the filename grammar.

    Lesion masks (if given) go to ``root/<split>/masks/<stem>.png``.
    """
    out_dir = Path(root) / index.split
    out_dir.mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    paths = []
    for i, e in enumerate(index.entries):
        k = counters.get(e.patient_id, 0)
        counters[e.patient_id] = k + 1
        stem = f"{e.label.upper()}-{e.patient_id}-{k:03d}"
        path = out_dir / f"{stem}.png"
        write_gray8(path, e.pixels)
        paths.append(path)
        if masks is not None and masks[i] is not None:
            (out_dir / "masks").mkdir(exist_ok=True)
            write_mask(out_dir / "masks" / f"{stem}.png", masks[i])
    return paths


def sample_positive(anchor: BScanImage, index: DatasetIndex, mode: str = "inter_patient",
                    rng: np.random.Generator | None = None) -> BScanImage:
    """Draw a positive uniformly from the entries eligible for ``mode``."""
    rng = rng if rng is not None else np.random.default_rng()
    if mode == "inter_patient":
        candidates = [e for e in index.entries if e.patient_id != anchor.patient_id]
    elif mode == "intra_patient":
        candidates = [e for e in index.entries if e.patient_id == anchor.patient_id and e is not anchor]
    else:
        raise ValueError(f"unknown positive mode {mode!r}")
    if not candidates:
        hint = ("use a dataset with at least two patients or positive_mode=intra_patient"
                if mode == "inter_patient" else
                "use a dataset with several slices per patient or positive_mode=inter_patient")
        raise SamplingError(f"no eligible positive for patient {anchor.patient_id!r} in {mode} mode; {hint}")
    return candidates[int(rng.integers(len(candidates)))]


@dataclass(eq=False)
class TripletSample:
    anchor: BScanImage
    positive: BScanImage
    negative: BScanImage
    roi: "ROIMask"
    perturbation: dict = field(default_factory=dict)

    @property
    def targets(self) -> dict[str, BScanImage]:
        # the negative is reconstructed toward its (normal) anchor
        return {"anchor": self.anchor, "positive": self.positive, "negative": self.anchor}

    def pairs(self) -> list[tuple[BScanImage, BScanImage]]:
        t = self.targets
        return [(self.anchor, t["anchor"]), (self.positive, t["positive"]), (self.negative, t["negative"])]


def assemble_triplet(anchor: BScanImage, index: DatasetIndex, mode: str = "inter_patient",
                     rng: np.random.Generator | None = None, roi_cfg=None, perturb_cfg=None,
                     roi: "ROIMask | None" = None) -> Optional[TripletSample]:
    """Anchor + positive + ROI-confined perturbed negative.

    Returns None (with a warning) when ROI extraction fails on the anchor.
    A precomputed ``roi`` skips extraction.
    """
    from .perturb import PerturbConfig, perturb_with_info
    from .roi import GaborBankConfig, extract_roi

    rng = rng if rng is not None else np.random.default_rng()
    if anchor.label == "abnormal":
        raise DatasetError("anchors must be normal images")
    if roi is None:
        roi = extract_roi(anchor.pixels, roi_cfg or GaborBankConfig())
    if not roi.valid:
        log.warning("ROI extraction failed for %s (coverage %.3f); triplet skipped", anchor.name, roi.coverage)
        return None
    positive = sample_positive(anchor, index, mode, rng)
    neg_pixels, info = perturb_with_info(anchor.pixels, roi.mask, perturb_cfg or PerturbConfig(), rng)
    negative = dataclasses.replace(anchor, pixels=neg_pixels, label="abnormal", band=None)
    return TripletSample(anchor, positive, negative, roi, info)


def normal_only(entries: Iterable[BScanImage]) -> list[BScanImage]:
    return [e for e in entries if e.label != "abnormal"]


def synthetic_eval_split(cfg: PhantomConfig | None = None, n_normal: int = 50, n_abnormal: int = 50,
                         seed: int = 0, split: str = "test", roi_cfg=None,
                         perturb_cfg=None) -> tuple[DatasetIndex, list[Optional[np.ndarray]]]:
    """Labeled phantoms: ``n_normal`` normals plus ``n_abnormal`` perturbed ones.

    Returns the index and a parallel list of lesion masks (None for normals).
    Patients never overlap with a training set drawn with a different seed
    because ids carry the split name.
    """
    from .perturb import PerturbConfig, perturb_with_info
    from .roi import GaborBankConfig, extract_roi

    cfg = cfg or PhantomConfig()
    roi_cfg = roi_cfg or GaborBankConfig().scaled(cfg.size)
    perturb_cfg = perturb_cfg or PerturbConfig()
    entries: list[BScanImage] = []
    masks: list[Optional[np.ndarray]] = []
    if n_normal > 0:
        entries += generate_synthetic_dataset(cfg, n_normal, derive_seed(seed, split, "normal"), split,
                                              id_prefix=f"{split}n").entries
        masks += [None] * n_normal
    if n_abnormal > 0:
        base = generate_synthetic_dataset(cfg, n_abnormal, derive_seed(seed, split, "abnormal"), split,
                                          id_prefix=f"{split}a")
        for i, e in enumerate(base):
            roi = extract_roi(e.pixels, roi_cfg)
            region = roi.mask if roi.valid else e.band
            pixels, info = perturb_with_info(e.pixels, region, perturb_cfg, derive_rng(seed, split, "perturb", i))
            entries.append(BScanImage(pixels, e.patient_id, "abnormal", band=e.band))
            masks.append(info["lesion_mask"])
    return DatasetIndex(entries, split), masks
