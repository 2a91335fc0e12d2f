"""Trimmed, diffused and patch-aggregated inlier masks.

Residuals are per-pixel RGB error norms. A batch of square neighborhoods
shares one trimming threshold (a nearest-rank quantile over every pixel in
the batch). Labels then go through three stages:

1. trimming: ``eps <= threshold``
2. diffusion: a pixel also becomes an inlier when at least ``diffuse_threshold``
   of its zero-padded 3x3 box is inlier
3. patching: the centered ``inner_patch`` block becomes inlier when at least
   ``patch_threshold`` of the whole neighborhood is inlier

Every stage only promotes labels, so the inlier sets are nested.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imageio import write_ppm


class MaskMode(str, enum.Enum):
    TRIM_ONLY = "trim_only"
    TRIM_DIFFUSE = "trim_diffuse"
    FULL = "full"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        key = {"trimonly": "trim_only", "trimdiffuse": "trim_diffuse"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown mask mode {value!r}") from None


@dataclass(frozen=True)
class MaskConfig:
    trim_quantile: float = 0.5
    diffuse_threshold: float = 0.5
    patch_threshold: float = 0.6
    neighborhood: int = 16
    inner_patch: int = 8
    mode: MaskMode = MaskMode.FULL
    # inner block forced to outlier when the neighborhood falls below the
    # patch threshold, instead of keeping per-pixel labels
    hard_patch_labeling: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", MaskMode.parse(self.mode))
        if not 0.0 < self.trim_quantile <= 1.0:
            raise ValueError(f"trim_quantile must be in (0, 1], got {self.trim_quantile}")
        for name in ("diffuse_threshold", "patch_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.neighborhood <= 0 or self.inner_patch <= 0:
            raise ValueError("neighborhood and inner_patch must be positive")
        if self.inner_patch > self.neighborhood:
            raise ValueError("inner_patch must not exceed neighborhood")
        if (self.neighborhood - self.inner_patch) % 2:
            raise ValueError("neighborhood - inner_patch must be even so the inner block is centered")

    @property
    def inner_slice(self):
        lo = (self.neighborhood - self.inner_patch) // 2
        return slice(lo, lo + self.inner_patch)

    def to_dict(self):
        return {"trim_quantile": self.trim_quantile,
                "diffuse_threshold": self.diffuse_threshold,
                "patch_threshold": self.patch_threshold,
                "neighborhood": self.neighborhood,
                "inner_patch": self.inner_patch,
                "mode": self.mode.value,
                "hard_patch_labeling": self.hard_patch_labeling}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class InlierMask:
    """Boolean inlier labels for each pipeline stage, shape ``(B, N, N)``."""

    trimmed: np.ndarray
    diffused: np.ndarray
    final: np.ndarray
    threshold_used: float
    weights: np.ndarray = field(default=None, repr=False)

    def inlier_fraction(self):
        return float(self.final.mean())


def compute_residual_map(predicted, observed):
    """Per-pixel Euclidean norm of the RGB difference (last axis)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {observed.shape}")
    if predicted.ndim < 1 or predicted.shape[-1] != 3:
        raise ValueError("expected RGB data with 3 channels in the last axis")
    return np.sqrt(np.sum((predicted - observed) ** 2, axis=-1))


def _nearest_rank(q, n):
    # 1-based rank ceil(q n); rounding guards q*n landing a hair above an integer
    return min(n, max(1, math.ceil(round(q * n, 9))))


def trim_threshold(residuals, quantile=0.5):
    """Nearest-rank quantile: the ``ceil(q n)``-th smallest residual."""
    values = np.asarray(residuals, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot trim an empty residual set")
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {quantile}")
    k = _nearest_rank(quantile, values.size) - 1
    return float(np.partition(values, k)[k])


def _box3_counts(labels):
    # zero-padded 3x3 inlier counts over the last two axes
    padded = np.pad(labels.astype(np.int16), [(0, 0)] * (labels.ndim - 2) + [(1, 1), (1, 1)])
    h, w = labels.shape[-2:]
    counts = np.zeros(labels.shape, dtype=np.int16)
    for dy in range(3):
        for dx in range(3):
            counts += padded[..., dy:dy + h, dx:dx + w]
    return counts


def diffuse(trimmed, threshold=0.5):
    return trimmed | (_box3_counts(trimmed) / 9.0 >= threshold)


def compute_robust_mask(residuals, config: MaskConfig = MaskConfig()) -> InlierMask:
    """Run the staged pipeline on a batch of ``(B, N, N)`` residual maps.

    ``weights`` on the result is the per-pixel loss weight: the final label
    restricted to the centered inner block.
    """
    eps = np.asarray(residuals, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    n = config.neighborhood
    if eps.ndim != 3 or eps.shape[0] == 0 or eps.shape[1:] != (n, n):
        raise ValueError(f"expected a non-empty batch of {n}x{n} residual maps, got {eps.shape}")
    if not np.all(np.isfinite(eps)) or np.any(eps < 0):
        raise ValueError("residuals must be finite and >= 0")

    thr = trim_threshold(eps, config.trim_quantile)
    trimmed = eps <= thr
    if config.mode is MaskMode.TRIM_ONLY:
        diffused = trimmed.copy()
    else:
        diffused = diffuse(trimmed, config.diffuse_threshold)

    final = diffused.copy()
    inner = config.inner_slice
    if config.mode is MaskMode.FULL:
        promote = diffused.mean(axis=(1, 2)) >= config.patch_threshold
        block = final[:, inner, inner]
        block |= promote[:, None, None]
        if config.hard_patch_labeling:
            block &= promote[:, None, None]
        final[:, inner, inner] = block

    weights = np.zeros_like(final)
    weights[:, inner, inner] = final[:, inner, inner]
    return InlierMask(trimmed=trimmed, diffused=diffused, final=final,
                      threshold_used=thr, weights=weights)


def compute_image_mask(residual_image, config: MaskConfig = MaskConfig()) -> InlierMask:
    """Whole-image version of the pipeline, for visualization and scoring.

    The threshold is taken over the image; patching runs on each
    ``inner_patch`` tile using the ``neighborhood`` window centered on it,
    clipped at the image border.
    """
    eps = np.asarray(residual_image, dtype=np.float64)
    if eps.ndim != 2:
        raise ValueError("expected a 2-D residual image")
    thr = trim_threshold(eps, config.trim_quantile)
    trimmed = eps <= thr
    diffused = trimmed.copy() if config.mode is MaskMode.TRIM_ONLY else diffuse(trimmed, config.diffuse_threshold)
    final = diffused.copy()
    if config.mode is MaskMode.FULL:
        h, w = eps.shape
        p, pad = config.inner_patch, (config.neighborhood - config.inner_patch) // 2
        for y0 in range(0, h, p):
            for x0 in range(0, w, p):
                win = diffused[max(0, y0 - pad):y0 + p + pad, max(0, x0 - pad):x0 + p + pad]
                ok = win.mean() >= config.patch_threshold
                if ok:
                    final[y0:y0 + p, x0:x0 + p] = True
                elif config.hard_patch_labeling:
                    final[y0:y0 + p, x0:x0 + p] = False
    return InlierMask(trimmed=trimmed[None], diffused=diffused[None], final=final[None],
                      threshold_used=thr, weights=final[None])


def mask_to_image(mask):
    """Boolean inlier mask -> uint8 (0 outlier, 255 inlier)."""
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def tile_batch(masks, cols=None, gap=1):
    """Lay out a ``(B, N, N)`` batch on a grid, separated by ``gap`` pixels."""
    masks = np.asarray(masks)
    b, n, _ = masks.shape
    cols = cols or int(math.ceil(math.sqrt(b)))
    rows = int(math.ceil(b / cols))
    out = np.zeros((rows * (n + gap) - gap, cols * (n + gap) - gap), dtype=masks.dtype)
    for i in range(b):
        r, c = divmod(i, cols)
        out[r * (n + gap):r * (n + gap) + n, c * (n + gap):c * (n + gap) + n] = masks[i]
    return out


def dump_mask_stages(mask: InlierMask, out_dir, step, tiled=True):
    """Write the three stages as 8-bit PPMs; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stage in ("trimmed", "diffused", "final"):
        m = getattr(mask, stage)
        img = tile_batch(m) if tiled and m.shape[0] > 1 else m[0]
        path = out_dir / f"mask_{stage}_{step:07d}.ppm"
        write_ppm(path, np.repeat(mask_to_image(img)[..., None], 3, axis=-1))
        paths.append(path)
    return paths
