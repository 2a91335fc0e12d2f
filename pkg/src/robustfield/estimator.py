"""scikit-learn style wrappers around the mask pipeline and the trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluate import compute_psnr
from .mask import MaskConfig, MaskMode, compute_robust_mask
from .render import render_image
from .train import TrainConfig, run_training
from .validation import check_cameras, check_dataset, check_residual_batch


class RobustMasker(TransformerMixin, BaseEstimator):
    """Residual maps ``(B, N, N)`` -> boolean inlier masks of the same shape.

    Stateless: ``fit`` only validates the parameters.
    """

    def __init__(self, trim_quantile=0.5, diffuse_threshold=0.5, patch_threshold=0.6, neighborhood=16,
                 inner_patch=8, mode="full", hard_patch_labeling=False):
        self.trim_quantile = trim_quantile
        self.diffuse_threshold = diffuse_threshold
        self.patch_threshold = patch_threshold
        self.neighborhood = neighborhood
        self.inner_patch = inner_patch
        self.mode = mode
        self.hard_patch_labeling = hard_patch_labeling

    def _config(self):
        return MaskConfig(trim_quantile=self.trim_quantile, diffuse_threshold=self.diffuse_threshold,
                          patch_threshold=self.patch_threshold, neighborhood=self.neighborhood,
                          inner_patch=self.inner_patch, mode=MaskMode(self.mode),
                          hard_patch_labeling=self.hard_patch_labeling)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        eps = check_residual_batch(X, self.config_.neighborhood)
        self.last_mask_ = compute_robust_mask(eps, self.config_)
        return self.last_mask_.final


class RobustRadianceField(BaseEstimator):
    """Voxel radiance field fit to a ``Dataset``'s training frames.

    ``predict`` renders cameras (or a dataset's eval split); ``score``
    returns mean PSNR over the eval split.
    """

    def __init__(self, loss="robust", mask_mode="full", trim_quantile=0.5, neighborhood=16, inner_patch=8,
                 steps=15_000, patches_per_batch=16, lr_init=0.02, lr_final=0.0002, warmup_steps=512,
                 n_samples=64, resolution=64, sh_degree=1, init_density=0.1, seed=0,
                 log_interval=100, eval_interval=0, out_dir=None):
        self.loss = loss
        self.mask_mode = mask_mode
        self.trim_quantile = trim_quantile
        self.neighborhood = neighborhood
        self.inner_patch = inner_patch
        self.steps = steps
        self.patches_per_batch = patches_per_batch
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.warmup_steps = warmup_steps
        self.n_samples = n_samples
        self.resolution = resolution
        self.sh_degree = sh_degree
        self.init_density = init_density
        self.seed = seed
        self.log_interval = log_interval
        self.eval_interval = eval_interval
        self.out_dir = out_dir

    def to_config(self) -> TrainConfig:
        mask = MaskConfig(trim_quantile=self.trim_quantile, neighborhood=self.neighborhood,
                          inner_patch=self.inner_patch, mode=MaskMode(self.mask_mode))
        return TrainConfig(loss_mode=self.loss, mask=mask, steps=self.steps,
                           patches_per_batch=self.patches_per_batch, lr_init=self.lr_init,
                           lr_final=self.lr_final, warmup_steps=self.warmup_steps, n_samples=self.n_samples,
                           resolution=self.resolution, sh_degree=self.sh_degree,
                           init_density=self.init_density, seed=self.seed, log_interval=self.log_interval,
                           eval_interval=self.eval_interval)

    def fit(self, X, y=None):
        X = check_dataset(X)
        result = run_training(self.to_config(), X, self.out_dir)
        self.field_ = result.field
        self.history_ = result.history
        self.background_ = np.asarray(X.spec.background, dtype=np.float64)
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        cams = check_cameras(X)
        return np.stack([render_image(self.field_, c, self.n_samples, self.background_) for c in cams])

    def score(self, X, y=None):
        check_is_fitted(self, "field_")
        frames = X.eval_frames if hasattr(X, "eval_frames") else list(X)
        preds = self.predict(frames)
        return float(np.mean([compute_psnr(p, f.image) for p, f in zip(preds, frames)]))
