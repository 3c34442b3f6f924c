"""Command-line entry point: ``octvq <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
Errors are printed to stderr on one line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import evaluation as ev
from . import score as sc
from .data import (DatasetError, _LABEL_TOKENS, generate_synthetic_dataset, load_folder,
                   parse_filename, synthetic_eval_split, write_dataset)
from .imageio import IMAGE_SUFFIXES, read_gray, read_mask, write_gray8, write_gray16, write_heatmap, write_mask
from .perturb import perturb_with_info
from .roi import extract_roi
from .seeding import derive_rng

log = logging.getLogger("octvq")


class UsageError(Exception):
    """Bad arguments detected after parsing; maps to exit code 2."""


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


# ---------------------------------------------------------------- config

def _overrides(args) -> dict[str, str]:
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.workers is not None:
        over["workers"] = str(args.workers)
    if getattr(args, "binarization", None) is not None:
        over["binarization"] = args.binarization
    if getattr(args, "restrict_to_roi", None) is not None:
        over["restrict_to_roi"] = str(args.restrict_to_roi).lower()
    return over


def _run_config(args) -> cfgmod.RunConfig:
    try:
        return cfgmod.resolve(args.config, _overrides(args))
    except (cfgmod.ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None


def _snapshot(path: Path, rc: cfgmod.RunConfig, args, extra: Optional[dict] = None) -> Path:
    """Resolved config plus the command line that produced it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [cfgmod.to_text(rc).rstrip("\n"), f"# command: {args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command", "set", "config"):
            continue
        lines.append(f"# arg {k}: {v}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _sidecar(out: Path, suffix: str = ".config.txt") -> Path:
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------- helpers

def _image_paths(items: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.is_file() and q.suffix.lower() in IMAGE_SUFFIXES)
        elif p.is_file():
            paths.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    if not paths:
        raise FileNotFoundError("no input images found")
    return paths


def _train_dir(data: str) -> Path:
    root = Path(data)
    return root / "train" if (root / "train").is_dir() else root


def _label_value(text: str) -> int:
    t = text.strip()
    if t in ("0", "1"):
        return int(t)
    lab = t.lower() if t.lower() in ("normal", "abnormal") else _LABEL_TOKENS.get(t.upper())
    if lab is None:
        raise ValueError(f"cannot interpret label {text!r}")
    return int(lab == "abnormal")


def _read_table(path: str | Path) -> list[dict[str, str]]:
    """TSV with a header row (the first column must be ``id``)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0][0] != "id":
        raise ValueError(f"{path}: expected a TSV header starting with 'id'")
    head = rows[0]
    return [dict(zip(head, r)) for r in rows[1:] if r and r[0]]


def _labels_for(rows: list[dict[str, str]], labels: dict[str, int], source: str) -> np.ndarray:
    out = []
    for r in rows:
        if "label" in r and r["label"] not in ("", "NA"):
            out.append(_label_value(r["label"]))
        elif r["id"] in labels:
            out.append(labels[r["id"]])
        else:
            try:
                out.append(_label_value(parse_filename(r["id"])[1]))
            except ValueError:
                raise ValueError(f"no label for {r['id']!r} in {source}") from None
    return np.array(out, dtype=int)


def _load_eval_folder(directory: str, resolution: int):
    index = load_folder(directory, resolution, split="test")
    if len(index) == 0:
        raise DatasetError(f"no images in {directory}")
    return index


def _gt_masks(index, gt_dir: Path, resolution: int):
    """(positions, masks) for the images that have a ground-truth mask file."""
    from .imageio import resize_bilinear
    keep, masks = [], []
    for i, e in enumerate(index):
        for suffix in (".png", ".tif", ".tiff", ".bmp"):
            p = gt_dir / f"{e.name}{suffix}"
            if p.exists():
                m = read_mask(p)
                if m.shape != (resolution, resolution):
                    m = resize_bilinear(m.astype(np.float64), resolution) >= 0.5
                keep.append(i)
                masks.append(m)
                break
    if not keep:
        raise DatasetError(f"no ground-truth masks in {gt_dir} match the images")
    return keep, masks


def _rois(rc, images: np.ndarray, model_res: int):
    if not rc.scoring.restrict_to_roi:
        return None
    roi_cfg = rc.train.roi.scaled(model_res, base=rc.train.model.input_resolution)
    out = []
    for x in images:
        r = extract_roi(x, roi_cfg)
        out.append(r.mask if r.valid else None)
    return out


def _threshold(args, model, resolution: int) -> Optional[sc.Threshold]:
    if args.threshold is not None:
        return sc.Threshold(float(args.threshold), float("nan"), "given")
    if args.fit_threshold:
        val = load_folder(args.fit_threshold, resolution, split="val")
        scores, _ = sc.score_images(np.stack([e.pixels for e in val]), model)
        labels = ev._labels_of(val)
        return sc.select_threshold_youden(scores, labels, fitted_on=str(args.fit_threshold))
    return None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    train = generate_synthetic_dataset(rc.phantom, args.n, rc.train.seed, "train", id_prefix="p")
    write_dataset(train, out)
    counts = {"train": len(train)}
    for split, n_norm, n_abn in (("val", args.val_normal, args.val_abnormal),
                                 ("test", args.test_normal, args.test_abnormal)):
        if n_norm + n_abn == 0:
            continue
        idx, masks = synthetic_eval_split(rc.phantom, n_norm, n_abn, rc.train.seed, split,
                                          rc.train.roi.scaled(rc.phantom.size, base=rc.train.model.input_resolution),
                                          rc.train.perturb)
        write_dataset(idx, out, masks)
        counts[split] = len(idx)
    _snapshot(out / "generation_config.txt", rc, args)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_extract_roi(args) -> int:
    rc = _run_config(args)
    n_bad = 0
    for path in _image_paths(args.images):
        img = read_gray(path)
        cfg = rc.train.roi.scaled(img.shape[1], base=rc.train.model.input_resolution)
        roi = extract_roi(img, cfg)
        out_dir = Path(args.out_dir) if args.out_dir else path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        write_mask(out_dir / f"{path.stem}.roi.png", roi.mask)
        if not roi.valid:
            n_bad += 1
            log.warning("%s: ROI invalid (coverage %.3f, degenerate=%s)", path, roi.coverage, roi.degenerate)
        print(f"{path.name}\tcoverage={roi.coverage:.4f}\tvalid={roi.valid}")
    if args.out_dir:
        _snapshot(Path(args.out_dir) / "roi_config.txt", rc, args)
    return 0


def cmd_perturb(args) -> int:
    rc = _run_config(args)
    paths = _image_paths(args.images)
    if args.roi and len(paths) != 1:
        raise UsageError("--roi can only be used with a single input image")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        img = read_gray(path)
        if args.roi:
            roi = read_mask(args.roi)
            if roi.shape != img.shape:
                raise ValueError(f"ROI shape {roi.shape} does not match image shape {img.shape}")
        else:
            r = extract_roi(img, rc.train.roi.scaled(img.shape[1], base=rc.train.model.input_resolution))
            if not r.valid:
                raise ValueError(f"{path}: ROI extraction failed (coverage {r.coverage:.3f}); pass --roi")
            roi = r.mask
        neg, info = perturb_with_info(img, roi, rc.train.perturb, derive_rng(rc.train.seed, "perturb", path.name))
        write_gray8(out_dir / f"{path.stem}.neg.png", neg)
        write_mask(out_dir / f"{path.stem}.lesion.png", info["lesion_mask"])
        lines = [f"mode: {info['mode']}", f"retries: {info['attempt']}"]
        for k, v in info.get("deform", {}).items():
            lines.append(f"deform.{k}: {v}")
        for j, blob in enumerate(info.get("fluid", [])):
            lines += [f"fluid{j}.{k}: {v}" for k, v in blob.items()]
        (out_dir / f"{path.stem}.neg.txt").write_text("\n".join(lines) + "\n")
    _snapshot(out_dir / "perturb_config.txt", rc, args)
    return 0


def cmd_train(args) -> int:
    from .train import fit
    rc = _run_config(args)
    index = load_folder(_train_dir(args.data), rc.train.model.input_resolution, split="train")
    index.check_training()
    if len(index) == 0:
        raise DatasetError(f"no training images in {args.data}")
    out = Path(args.out)
    _snapshot(out / "resolved_config.txt", rc, args)
    final = fit(index, rc.train, out, max_steps=args.max_steps, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_score(args) -> int:
    from .train import load_model
    rc = _run_config(args)
    model = load_model(args.checkpoint)
    res = model.cfg.input_resolution
    index = _load_eval_folder(args.data, res)
    thr = _threshold(args, model, res)
    scores, _ = sc.score_images(np.stack([e.pixels for e in index]), model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pred = sc.classify(scores, thr.t_star) if thr else None
    with open(out, "w") as fh:
        fh.write("id\tscore\tlabel_pred\n")
        for i, (e, s) in enumerate(zip(index, scores)):
            fh.write(f"{e.name}\t{s:.10g}\t{'NA' if pred is None else int(pred[i])}\n")
    extra = {"t_star": thr.t_star, "threshold_source": thr.fitted_on} if thr else {}
    _snapshot(_sidecar(out), rc, args, extra)
    print(f"scored {len(index)} image(s)" + (f", t*={thr.t_star:.6g}" if thr else ""))
    return 0


def cmd_localize(args) -> int:
    from .train import load_model
    rc = _run_config(args)
    model = load_model(args.checkpoint)
    res = model.cfg.input_resolution
    index = _load_eval_folder(args.data, res)
    images = np.stack([e.pixels for e in index])
    recons = sc.reconstruct(model, images)
    rois = _rois(rc, images, res)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(index):
        amap = sc.anomaly_map(images[i], recons[i], rc.scoring.map_alpha, rc.scoring.map_beta,
                              metric=rc.scoring.map_metric)
        pm = sc.binarize_map(amap, rc.scoring.binarization, None if rois is None else rois[i])
        write_gray16(out_dir / f"{e.name}.map.png", amap)
        write_heatmap(out_dir / f"{e.name}.heat.png", amap / amap.max() if amap.max() > 0 else amap)
        write_mask(out_dir / f"{e.name}.mask.png", pm.mask)
    _snapshot(out_dir / "localize_config.txt", rc, args)
    print(f"localized {len(index)} image(s)")
    return 0


def cmd_evaluate(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    if args.task == "detection":
        if not args.scores:
            raise UsageError("--task detection requires --scores")
        if args.threshold is None and not args.fit_threshold:
            raise UsageError("detection needs --threshold or --fit-threshold")
        label_map = {}
        if args.labels:
            label_map = {r["id"]: _label_value(r["label"]) for r in _read_table(args.labels)}
        rows = _read_table(args.scores)
        y = _labels_for(rows, label_map, str(args.labels or args.scores))
        s = np.array([float(r["score"]) for r in rows])
        if args.threshold is not None:
            thr = sc.Threshold(float(args.threshold), float("nan"), "given")
        else:
            vrows = _read_table(args.fit_threshold)
            vy = _labels_for(vrows, label_map, str(args.fit_threshold))
            thr = sc.select_threshold_youden([float(r["score"]) for r in vrows], vy, fitted_on=str(args.fit_threshold))
        report = ev.detection_report(s, y, thr, ids=[r["id"] for r in rows])
    else:
        from .train import load_model
        if not (args.checkpoint and args.data):
            raise UsageError("--task segmentation requires --checkpoint and --data")
        model = load_model(args.checkpoint)
        res = model.cfg.input_resolution
        index = _load_eval_folder(args.data, res)
        keep, gts = _gt_masks(index, Path(args.gt) if args.gt else Path(args.data) / "masks", res)
        images = np.stack([index[i].pixels for i in keep])
        report = ev.run_segmentation_eval(model, images, gts, rc.scoring.map_metric, rc.scoring.binarization,
                                          _rois(rc, images, res), ids=[index[i].name for i in keep])
        report.config += f"\nmap_alpha: {rc.scoring.map_alpha}\nmap_beta: {rc.scoring.map_beta}"
    txt, _ = report.write(out)
    _snapshot(_sidecar(txt), rc, args)
    print(report.to_text().split("\n# config")[0].rstrip())
    return 0


def cmd_compare_metrics(args) -> int:
    from .train import load_model
    rc = _run_config(args)
    models = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        path = path or item
        name = name or Path(path).parent.name or Path(path).stem
        models[name] = load_model(path)
    res = {m.cfg.input_resolution for m in models.values()}
    if len(res) != 1:
        raise ValueError("all checkpoints must share one input resolution")
    res = res.pop()
    index = _load_eval_folder(args.data, res)
    keep, gts = _gt_masks(index, Path(args.gt) if args.gt else Path(args.data) / "masks", res)
    images = np.stack([index[i].pixels for i in keep])
    grid = ev.compare_metrics(models, images, gts, rc.scoring.binarization, _rois(rc, images, res))
    out = ev.write_metric_grid(grid, args.out)
    _snapshot(_sidecar(out), rc, args)
    print(out.read_text().rstrip())
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key: value' config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="master seed (config key 'seed')")
    common.add_argument("--workers", type=_positive_int, default=None, help="data-pipeline workers")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    maps = argparse.ArgumentParser(add_help=False)
    maps.add_argument("--binarization", default=None,
                      help="map binarization: global_otsu, percentile(p) or fixed(t) (config default global_otsu)")
    maps.add_argument("--restrict-to-roi", action=argparse.BooleanOptionalAction, default=None,
                      help="threshold maps over Gabor-ROI pixels only (config default: off)")

    p = argparse.ArgumentParser(prog="octvq", description=__doc__, formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate synthetic phantoms")
    s.add_argument("--n", type=_positive_int, default=200, help="number of training normals")
    s.add_argument("--out", required=True, help="dataset root (writes <out>/train/ ...)")
    for split in ("val", "test"):
        s.add_argument(f"--{split}-normal", type=_nonneg_int, default=0, help=f"normals in {split}/")
        s.add_argument(f"--{split}-abnormal", type=_nonneg_int, default=0,
                       help=f"perturbed phantoms in {split}/ (lesion masks in {split}/masks/)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract-roi", parents=[common], formatter_class=fmt, help="Gabor retinal-band mask")
    s.add_argument("images", nargs="+", help="image files or directories")
    s.add_argument("--out-dir", default=None, help="output directory (default: next to each input)")
    s.set_defaults(func=cmd_extract_roi)

    s = sub.add_parser("perturb", parents=[common], formatter_class=fmt, help="synthesize pseudo-abnormal negatives")
    s.add_argument("images", nargs="+", help="image files or directories")
    s.add_argument("--roi", default=None, help="ROI mask PNG (default: extracted)")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train the model")
    s.add_argument("--data", required=True, help="dataset root with train/, or a folder of normal images")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--max-steps", type=_positive_int, default=None, help="stop early after this many steps")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], formatter_class=fmt, help="image-level anomaly scores")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="folder of images to score")
    s.add_argument("--out", required=True, help="output TSV: id, score, label_pred")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, default=None, help="reuse a frozen t*")
    g.add_argument("--fit-threshold", default=None, help="labeled validation folder to fit t* on (Youden J)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("localize", parents=[common, maps], formatter_class=fmt, help="pixel-level anomaly maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="folder of images")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", parents=[common, maps], formatter_class=fmt,
                       help="detection or segmentation report")
    s.add_argument("--task", choices=("detection", "segmentation"), required=True)
    s.add_argument("--scores", default=None, help="[detection] test scores TSV")
    s.add_argument("--labels", default=None, help="[detection] TSV with id, label columns")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, default=None, help="[detection] frozen t*")
    g.add_argument("--fit-threshold", default=None, help="[detection] validation scores TSV to fit t* on")
    s.add_argument("--checkpoint", default=None, help="[segmentation] model checkpoint")
    s.add_argument("--data", default=None, help="[segmentation] folder of images")
    s.add_argument("--gt", default=None, help="[segmentation] ground-truth mask folder (default <data>/masks)")
    s.add_argument("--out", required=True, help="report stem; writes <out>.txt and <out>.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare-metrics", parents=[common, maps], formatter_class=fmt,
                       help="Dice/mIoU grid over Weighted, L1, SSIM, MSE maps")
    s.add_argument("--checkpoint", action="append", required=True, metavar="[NAME=]PATH",
                   help="model checkpoint (repeatable)")
    s.add_argument("--data", required=True, help="folder of images")
    s.add_argument("--gt", default=None, help="ground-truth mask folder (default <data>/masks)")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_compare_metrics)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad arguments
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
