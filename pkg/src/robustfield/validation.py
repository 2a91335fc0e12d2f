"""Input checks shared by the estimator and CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .camera import CameraModel
from .scene import Dataset, FrameRecord


def check_residual_batch(residuals, neighborhood=None):
    """Finite, non-negative ``(B, N, N)`` residual maps as float64."""
    arr = check_array(residuals, allow_nd=True, ensure_2d=False, dtype=np.float64,
                      ensure_all_finite=True, ensure_min_samples=1)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected (B, N, N) residual maps, got shape {arr.shape}")
    if neighborhood is not None and arr.shape[1] != neighborhood:
        raise ValueError(f"residual maps are {arr.shape[1]}x{arr.shape[1]}, expected {neighborhood}x{neighborhood}")
    if np.any(arr < 0):
        raise ValueError("residuals must be non-negative")
    return arr


def check_image(image, name="image"):
    arr = check_array(image, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be (H, W, 3), got {arr.shape}")
    return arr


def check_dataset(X, require_train=True):
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    if require_train and not X.train_frames:
        raise ValueError("dataset has no training frames")
    for f in X.frames:
        f.validate()
    return X


def check_cameras(X):
    """Accepts a Dataset (eval split), frames, or cameras; returns cameras."""
    if isinstance(X, Dataset):
        X = X.eval_frames
    if isinstance(X, (CameraModel, FrameRecord)):
        X = [X]
    cams = [x.camera if isinstance(x, FrameRecord) else x for x in X]
    if not cams:
        raise ValueError("no cameras given")
    for c in cams:
        if not isinstance(c, CameraModel):
            raise TypeError(f"expected CameraModel, got {type(c).__name__}")
        c.validate()
    return cams
