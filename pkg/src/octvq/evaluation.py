"""Detection and segmentation metrics, evaluation protocols and report files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import score as sc

EMPTY_MASK_CONVENTION = "dice=iou=1 when prediction and ground truth are both empty; 0 when exactly one is"


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    n_samples: int
    config: str = ""
    records: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        width = max(len(k) for k in self.metrics) if self.metrics else 0
        lines = [f"task: {self.task}", f"n_samples: {self.n_samples}"]
        lines += [f"{k.ljust(width)}  {v:.6f}" for k, v in self.metrics.items()]
        if self.config:
            lines += ["", "# config", self.config]
        return "\n".join(lines) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt = stem.with_suffix(".txt")
        txt.write_text(self.to_text())
        csv_path = stem.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["metric", "value"])
            for k, v in self.metrics.items():
                wr.writerow([k, repr(float(v))])
        return txt, csv_path


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann–Whitney AUROC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC requires both classes")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def f1_accuracy(pred: Sequence[int], labels: Sequence[int]) -> dict[str, float]:
    p = _binary_labels(pred)
    y = _binary_labels(labels)
    if p.shape != y.shape:
        raise ValueError("pred and labels differ in length")
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    acc = float((p == y).mean()) if len(y) else 0.0
    return {"f1": f1, "accuracy": acc}


def dice_miou(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    p = np.asarray(pred, bool)
    g = np.asarray(gt, bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch {p.shape} vs {g.shape}")
    inter = int((p & g).sum())
    ps, gs = int(p.sum()), int(g.sum())
    union = ps + gs - inter
    if ps == 0 and gs == 0:
        return {"dice": 1.0, "iou": 1.0}
    return {"dice": 2 * inter / (ps + gs), "iou": inter / union}


def detection_report(test_scores, test_labels, threshold: sc.Threshold, config: str = "",
                     ids: Optional[Sequence[str]] = None) -> EvalReport:
    """F1 / Acc / AUROC at a frozen threshold; field names follow the usual detection table columns."""
    test_scores = np.asarray(test_scores, dtype=np.float64)
    y = _binary_labels(test_labels)
    pred = sc.classify(test_scores, threshold.t_star)
    fa = f1_accuracy(pred, y)
    metrics = {"F1": fa["f1"], "Acc": fa["accuracy"], "AUROC": auroc(test_scores, y), "t*": threshold.t_star}
    ids = ids if ids is not None else [str(i) for i in range(len(y))]
    records = [{"id": i, "score": float(s), "label": int(l), "pred": int(p)}
               for i, s, l, p in zip(ids, test_scores, y, pred)]
    cfg = config or f"threshold fitted on: {threshold.fitted_on or 'given'} (J={threshold.J:.4f})"
    return EvalReport("detection", metrics, len(y), cfg, records)


def _labels_of(index) -> np.ndarray:
    labels = [e.label for e in index]
    if any(l == "unknown" for l in labels):
        raise ValueError("evaluation images need normal/abnormal labels")
    return np.array([1 if l == "abnormal" else 0 for l in labels])


def _stack(index) -> np.ndarray:
    return np.stack([e.pixels for e in index])


def run_detection_eval(model, val_index, test_index, policy: str | float = "fit") -> EvalReport:
    """Score val and test images, fit (or reuse) t* and report F1/Acc/AUROC/t*.

    ``policy`` is ``"fit"`` (Youden J on the labeled val split) or a number
    to reuse as t*.
    """
    test_scores, _ = sc.score_images(_stack(test_index), model)
    if policy == "fit":
        val_scores, _ = sc.score_images(_stack(val_index), model)
        thr = sc.select_threshold_youden(val_scores, _labels_of(val_index), fitted_on=f"{val_index.split} split")
    else:
        thr = sc.Threshold(float(policy), float("nan"), "reused")
    return detection_report(test_scores, _labels_of(test_index), thr, ids=[e.name for e in test_index])


def segmentation_scores(images: np.ndarray, recons: np.ndarray, gts: Sequence[np.ndarray],
                        metric: str = "weighted", binarization="global_otsu",
                        rois: Optional[Sequence[Optional[np.ndarray]]] = None,
                        alpha: float = 0.6, beta: float = 0.4) -> list[dict]:
    out = []
    for i, (x, xh, g) in enumerate(zip(images, recons, gts)):
        amap = sc.anomaly_map(x, xh, alpha, beta, metric=metric)
        roi = None if rois is None else rois[i]
        pm = sc.binarize_map(amap, binarization, roi)
        rec = dice_miou(pm.mask, g)
        rec["degenerate"] = pm.degenerate
        out.append(rec)
    return out


def run_segmentation_eval(model, images: np.ndarray, gts: Sequence[np.ndarray], metric: str = "weighted",
                          binarization="global_otsu", rois=None, recons: Optional[np.ndarray] = None,
                          ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Mean Dice / mIoU over images (per-image means, not pooled pixels)."""
    images = np.asarray(images, dtype=np.float64)
    if recons is None:
        recons = sc.reconstruct(model, images)
    recs = segmentation_scores(images, recons, gts, metric, binarization, rois)
    ids = ids if ids is not None else [str(i) for i in range(len(recs))]
    for r, i in zip(recs, ids):
        r["id"] = i
    metrics = {"Dice": float(np.mean([r["dice"] for r in recs])) if recs else 0.0,
               "mIoU": float(np.mean([r["iou"] for r in recs])) if recs else 0.0}
    cfg = (f"metric: {metric}\nbinarization: {binarization}\nroi_restricted: {rois is not None}\n"
           f"empty_mask_convention: {EMPTY_MASK_CONVENTION}")
    return EvalReport("segmentation", metrics, len(recs), cfg, recs)


def compare_metrics(models: dict, images: np.ndarray, gts, binarization="global_otsu", rois=None) -> dict:
    """{model name: {metric: (dice, miou)}} over the four map metrics."""
    images = np.asarray(images, dtype=np.float64)
    grid = {}
    for name, model in models.items():
        recons = sc.reconstruct(model, images)
        grid[name] = {}
        for metric in sc.MAP_METRICS:
            rep = run_segmentation_eval(model, images, gts, metric, binarization, rois, recons=recons)
            grid[name][metric] = (rep.metrics["Dice"], rep.metrics["mIoU"])
    return grid


_GRID_COLS = {"weighted": "Weighted", "l1": "L1", "ssim": "SSIM", "mse": "MSE"}


def write_metric_grid(grid: dict, path: str | Path) -> Path:
    """CSV with one row per model and a column per (metric, measure): ``Weighted Dice``, ``Weighted mIoU``, ..."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model"] + [f"{_GRID_COLS[m]} {k}" for m in sc.MAP_METRICS for k in ("Dice", "mIoU")])
        for name, row in grid.items():
            wr.writerow([name] + [f"{v:.4f}" for m in sc.MAP_METRICS for v in row[m]])
    return path
