"""Image quality and mask quality metrics, residual histograms, checkpoint scoring."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EVAL_HEADER = ("frame", "split", "psnr", "ssim", "mask_precision", "mask_recall", "mask_iou")

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def compute_psnr(a, b):
    """10 log10(1 / MSE) over every channel; identical inputs give +inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation keeping only windows fully inside the image
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _gray(x):
    return x.mean(axis=-1) if x.ndim == 3 else x


def compute_ssim(a, b, data_range=1.0):
    """Gaussian-window SSIM on channel-mean grayscale, averaged over valid windows."""
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise ValueError("expected (H, W) or (H, W, C) images")
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def compute_mask_metrics(predicted_outlier, oracle_outlier):
    """Precision, recall and IoU of the outlier class.

    Both arguments flag outliers with True. Undefined ratios (nothing
    predicted, nothing to find, empty union) count as 1.
    """
    p = np.asarray(predicted_outlier, dtype=bool)
    o = np.asarray(oracle_outlier, dtype=bool)
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {o.shape}")
    tp = int(np.sum(p & o))
    n_p, n_o = int(p.sum()), int(o.sum())
    union = int(np.sum(p | o))
    return {
        "precision": tp / n_p if n_p else 1.0,
        "recall": tp / n_o if n_o else 1.0,
        "iou": tp / union if union else 1.0,
    }


def outlier_metrics(mask, oracle):
    """Mask metrics for an ``InlierMask`` (final stage) against an oracle."""
    return compute_mask_metrics(~np.asarray(mask.final).reshape(np.shape(oracle)), oracle)


# --------------------------------------------------------------------------
# checkpoint-level evaluation


def _resolve(checkpoint):
    from .field import VoxelField, load_checkpoint

    if isinstance(checkpoint, VoxelField):
        return checkpoint, {}
    return load_checkpoint(checkpoint)


def _render_settings(meta, n_samples, mask_config):
    from .mask import MaskConfig

    cfg = meta.get("config", {})
    if n_samples is None:
        n_samples = int(cfg.get("n_samples", 64))
    if mask_config is None:
        mask_config = MaskConfig.from_dict(cfg["mask"]) if "mask" in cfg else MaskConfig()
    return n_samples, mask_config


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("edges", "counts"))
            for i, e in enumerate(self.edges):
                w.writerow((format(float(e), ".17g"), int(self.counts[i]) if i < len(self.counts) else ""))
        return path


def residual_histogram(checkpoint, dataset, split="train", bins=50, n_samples=None, out_dir=None,
                       value_range=None):
    """Histograms of per-pixel residual norms, split by oracle label.

    Returns ``{"distractor": Histogram, "clean": Histogram}`` sharing one set
    of edges. With ``out_dir`` each is written to ``hist_{label}.csv``.
    """
    from .render import render_image
    from .scene import Split

    field, meta = _resolve(checkpoint)
    n_samples, _ = _render_settings(meta, n_samples, None)
    split = Split(split)
    frames = [f for f in dataset.frames if f.split is split]
    if not frames:
        raise ValueError(f"no {split.value} frames")
    if any(f.oracle_mask is None for f in frames):
        raise ValueError(f"oracle masks are missing for the {split.value} split")
    bg = dataset.spec.background
    res, lab = [], []
    for f in frames:
        pred = render_image(field, f.camera, n_samples, bg)
        res.append(np.sqrt(np.sum((pred - f.image) ** 2, axis=-1)).ravel())
        lab.append(f.oracle_mask.ravel())
    res, lab = np.concatenate(res), np.concatenate(lab)
    if value_range is None:
        top = float(res.max())
        value_range = (0.0, top if top > 0 else 1.0)
    edges = np.histogram_bin_edges(res, bins=bins, range=value_range)
    out = {
        "distractor": Histogram(edges, np.histogram(res[lab], bins=edges)[0]),
        "clean": Histogram(edges, np.histogram(res[~lab], bins=edges)[0]),
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        for label, h in out.items():
            h.write_csv(Path(out_dir) / f"hist_{label}.csv")
    return out


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def evaluate_checkpoint(checkpoint, dataset, out_csv=None, n_samples=None, include_train=False,
                        mask_config=None):
    """Score a checkpoint on the eval split.

    Returns ``(rows, aggregate)``. Each row holds frame id, split, PSNR and
    SSIM; with ``include_train`` the train frames are scored too and also
    carry outlier-mask metrics against their oracle masks. ``aggregate`` is
    the per-split mean, labelled ``mean`` in the CSV.
    """
    from .mask import compute_image_mask, compute_residual_map
    from .render import render_image
    from .scene import Split

    field, meta = _resolve(checkpoint)
    n_samples, mask_config = _render_settings(meta, n_samples, mask_config)
    bg = dataset.spec.background
    frames = [f for f in dataset.frames if f.split is Split.EVAL or (include_train and f.split is Split.TRAIN)]
    rows = []
    for f in frames:
        pred = render_image(field, f.camera, n_samples, bg)
        row = {"frame": f.index, "split": f.split.value, "psnr": compute_psnr(pred, f.image),
               "ssim": compute_ssim(pred, f.image), "mask_precision": None, "mask_recall": None,
               "mask_iou": None}
        if f.split is Split.TRAIN and f.oracle_mask is not None:
            m = compute_image_mask(compute_residual_map(pred, f.image), mask_config)
            mm = outlier_metrics(m, f.oracle_mask)
            row.update(mask_precision=mm["precision"], mask_recall=mm["recall"], mask_iou=mm["iou"])
        rows.append(row)

    aggregate = []
    for split in ("eval", "train"):
        sub = [r for r in rows if r["split"] == split]
        if not sub:
            continue
        agg = {"frame": "mean", "split": split}
        for k in EVAL_HEADER[2:]:
            vals = [r[k] for r in sub if r[k] is not None]
            agg[k] = float(np.mean(vals)) if vals else None
        aggregate.append(agg)

    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            for r in rows + aggregate:
                w.writerow([_cell(r[k]) for k in EVAL_HEADER])
    return rows, aggregate
