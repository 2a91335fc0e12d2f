"""Patch-based minibatch training with baseline and robust photometric losses.

One optimizer step is one IRLS iteration: render the batch, compute per-pixel
weights from the current residuals (held fixed for the step), take one Adam
step on the weighted least-squares objective.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .evaluate import compute_mask_metrics, compute_psnr
from .field import FieldGradient, VoxelField, create_field, save_checkpoint
from .kernels import KernelKind, KernelSpec, irls_weight, kernel_value
from .mask import InlierMask, MaskConfig, compute_image_mask, compute_residual_map, compute_robust_mask, dump_mask_stages
from .render import MIN_NEAR, camera_rays, render_image, render_rays, render_rays_backward

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "inlier_fraction", "lr", "eval_psnr", "mask_iou")


class TrainingError(RuntimeError):
    pass


class LossMode(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"
    CHARBONNIER = "charbonnier"
    ORACLE = "oracle"
    ROBUST = "robust"
    KERNEL = "kernel"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown loss mode {value!r}") from None


@dataclass
class TrainConfig:
    loss_mode: LossMode = LossMode.ROBUST
    mask: MaskConfig = field(default_factory=MaskConfig)
    # used by the charbonnier and kernel modes
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(KernelKind.CHARBONNIER, scale_c=0.001))
    patches_per_batch: int = 16
    steps: int = 15_000
    lr_init: float = 0.02
    lr_final: float = 0.0002
    warmup_steps: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_samples: int = 64
    stratified: bool = True
    seed: int = 0
    resolution: int = 64
    sh_degree: int = 1
    init_density: float = 0.1
    log_interval: int = 100
    eval_interval: int = 1000
    eval_max_frames: int | None = None
    probe_frames: int = 4
    dump_masks: int = 0

    def __post_init__(self):
        self.loss_mode = LossMode.parse(self.loss_mode)
        if isinstance(self.mask, dict):
            self.mask = MaskConfig.from_dict(self.mask)
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec.from_dict(self.kernel)
        for name in ("patches_per_batch", "steps", "n_samples", "resolution", "log_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.eval_interval < 0 or self.dump_masks < 0:
            raise ValueError("warmup_steps, eval_interval and dump_masks must be >= 0")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")

    @property
    def neighborhood(self):
        return self.mask.neighborhood

    def with_(self, **kw):
        mask_kw = {k: kw.pop(k) for k in list(kw) if k in MaskConfig.__dataclass_fields__}
        cfg = replace(self, **kw)
        if mask_kw:
            cfg = replace(cfg, mask=cfg.mask.with_(**mask_kw))
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["loss_mode"] = self.loss_mode.value
        d["mask"] = self.mask.to_dict()
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def learning_rate(step, config: TrainConfig):
    """Exponential decay lr_init -> lr_final over the run, linear warmup on top."""
    t = min(step, config.steps) / config.steps
    lr = config.lr_init * (config.lr_final / config.lr_init) ** t
    if config.warmup_steps and step < config.warmup_steps:
        lr *= (step + 1) / config.warmup_steps
    return lr


# --------------------------------------------------------------------------
# losses


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray  # dL/dC, same shape as the prediction
    mask: InlierMask | None
    pixel_weights: np.ndarray  # which pixels entered the loss

    @property
    def inlier_fraction(self):
        if self.mask is not None:
            return self.mask.inlier_fraction()
        return float(self.pixel_weights.mean())


def _weighted_l2(diff, weights):
    n = weights.sum()
    if n == 0:
        logger.warning("degenerate batch: no pixel contributes to the loss")
        return 0.0, np.zeros_like(diff)
    w = weights[..., None].astype(np.float64)
    loss = float(np.sum(w * diff ** 2) / n)
    return loss, 2.0 * w * diff / n


def compute_loss(predicted, observed, mode=LossMode.L2, mask_config: MaskConfig = MaskConfig(),
                 kernel_spec: KernelSpec | None = None, oracle_masks=None) -> LossResult:
    """Photometric loss over a ``(B, N, N, 3)`` patch batch and its gradient.

    Per-pixel cost is the squared RGB error norm, averaged over the pixels
    that take part: all of them for L2, the non-distractor ones for the
    oracle, and the inlier pixels of each centered inner block for the
    robust mode. L1 and Charbonnier sum the kernel over channels.
    """
    mode = LossMode.parse(mode)
    pred = np.asarray(predicted, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    diff = pred - obs
    ones = np.ones(pred.shape[:-1], dtype=bool)
    n_pix = ones.sum()

    if mode is LossMode.L2:
        loss, grad = _weighted_l2(diff, ones)
        return LossResult(loss, grad, None, ones)
    if mode is LossMode.ORACLE:
        if oracle_masks is None:
            raise ValueError("oracle loss needs oracle masks")
        keep = ~np.asarray(oracle_masks, dtype=bool).reshape(ones.shape)
        loss, grad = _weighted_l2(diff, keep)
        return LossResult(loss, grad, None, keep)
    if mode is LossMode.ROBUST:
        mask = compute_robust_mask(compute_residual_map(pred, obs), mask_config)
        loss, grad = _weighted_l2(diff, mask.weights)
        return LossResult(loss, grad, mask, mask.weights)
    if mode is LossMode.L1:
        return LossResult(float(np.abs(diff).sum() / n_pix), np.sign(diff) / n_pix, None, ones)

    spec = kernel_spec or KernelSpec(KernelKind.CHARBONNIER, scale_c=0.001)
    if mode is LossMode.CHARBONNIER:
        spec = KernelSpec(KernelKind.CHARBONNIER, scale_c=spec.scale_c)
        mag = np.abs(diff)
        loss = float(np.sum(kernel_value(mag, spec)) / n_pix)
        return LossResult(loss, irls_weight(mag, spec) * diff / n_pix, None, ones)
    eps = np.sqrt(np.sum(diff ** 2, axis=-1))
    loss = float(np.sum(kernel_value(eps, spec)) / n_pix)
    return LossResult(loss, irls_weight(eps, spec)[..., None] * diff / n_pix, None, ones)


# --------------------------------------------------------------------------
# training state


@dataclass
class FrameRays:
    """Pre-computed per-pixel rays and targets for a set of frames."""

    origins: np.ndarray  # (F, H, W, 3)
    dirs: np.ndarray
    tnear: np.ndarray  # (F, H, W)
    tfar: np.ndarray
    images: np.ndarray  # (F, H, W, 3)
    oracle: np.ndarray | None  # (F, H, W) bool, True = distractor

    @classmethod
    def from_frames(cls, frames, bounds, min_near=MIN_NEAR):
        if not frames:
            raise ValueError("no frames to train on")
        h, w = frames[0].camera.height, frames[0].camera.width
        if any((f.camera.height, f.camera.width) != (h, w) for f in frames):
            raise ValueError("all training frames must share one image size")
        parts = [camera_rays(f.camera, bounds, min_near) for f in frames]
        oracle = None
        if all(f.oracle_mask is not None for f in frames):
            oracle = np.stack([f.oracle_mask for f in frames]).astype(bool)
        return cls(origins=np.stack([p[0] for p in parts]).reshape(len(frames), h, w, 3),
                   dirs=np.stack([p[1] for p in parts]).reshape(len(frames), h, w, 3),
                   tnear=np.stack([p[2] for p in parts]).reshape(len(frames), h, w),
                   tfar=np.stack([p[3] for p in parts]).reshape(len(frames), h, w),
                   images=np.stack([f.image for f in frames]).astype(np.float64),
                   oracle=oracle)

    @property
    def n_frames(self):
        return self.images.shape[0]


@dataclass
class TrainState:
    field: VoxelField
    m: np.ndarray
    v: np.ndarray
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def initial(cls, config: TrainConfig, bounds, dtype=np.float32):
        fld = create_field((config.resolution,) * 3, bounds, config.sh_degree, config.init_density, dtype=dtype)
        return cls(field=fld, m=np.zeros_like(fld.params), v=np.zeros_like(fld.params),
                   rng=np.random.default_rng(config.seed))


@dataclass
class StepStats:
    step: int
    loss: float
    inlier_fraction: float
    lr: float
    mask: InlierMask | None = field(default=None, repr=False)
    patches: tuple = field(default=None, repr=False)  # (frame ids, y0, x0)


def sample_patches(rng, data: FrameRays, n_patches, size):
    _, h, w = data.tnear.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    fid = rng.integers(data.n_frames, size=n_patches)
    y0 = rng.integers(0, h - size + 1, size=n_patches)
    x0 = rng.integers(0, w - size + 1, size=n_patches)
    return fid, y0, x0


def _gather(arr, fid, y0, x0, size):
    ar = np.arange(size)
    ys = y0[:, None, None] + ar[None, :, None]
    xs = x0[:, None, None] + ar[None, None, :]
    return arr[fid[:, None, None], ys, xs]


def train_step(state: TrainState, data: FrameRays, config: TrainConfig, background) -> StepStats:
    """One Adam step on a freshly sampled patch batch."""
    n = config.neighborhood
    fid, y0, x0 = sample_patches(state.rng, data, config.patches_per_batch, n)
    o = _gather(data.origins, fid, y0, x0, n).reshape(-1, 3)
    d = _gather(data.dirs, fid, y0, x0, n).reshape(-1, 3)
    tn = _gather(data.tnear, fid, y0, x0, n).reshape(-1)
    tf = _gather(data.tfar, fid, y0, x0, n).reshape(-1)
    target = _gather(data.images, fid, y0, x0, n)
    oracle = _gather(data.oracle, fid, y0, x0, n) if data.oracle is not None else None
    jitter = state.rng.random((len(o), config.n_samples)) if config.stratified else None

    fld = state.field
    rgb, _ = render_rays(fld, o, d, tn, tf, config.n_samples, jitter, background)
    pred = rgb.reshape(target.shape)
    res = compute_loss(pred, target, config.loss_mode, config.mask, config.kernel, oracle)
    if not math.isfinite(res.loss):
        raise TrainingError(f"non-finite loss at step {state.step}")

    grad = FieldGradient(fld, dtype=np.float64)
    render_rays_backward(fld, o, d, tn, tf, res.grad.reshape(-1, 3), grad, config.n_samples, jitter, background)
    lr = learning_rate(state.step, config)
    _kernels.adam_update(fld.params.reshape(-1), grad.data.reshape(-1), state.m.reshape(-1),
                         state.v.reshape(-1), lr, config.adam_beta1, config.adam_beta2,
                         config.adam_eps, state.step + 1)
    stats = StepStats(state.step, res.loss, res.inlier_fraction, lr, res.mask, (fid, y0, x0))
    state.step += 1
    return stats


# --------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    field: VoxelField
    history: list
    config: TrainConfig
    seconds: float = 0.0

    def curve(self, key="eval_psnr"):
        return [(row["step"], row[key]) for row in self.history if row.get(key) is not None]


def eval_psnr(fld, frames, config, background):
    frames = frames[: config.eval_max_frames] if config.eval_max_frames else frames
    vals = [compute_psnr(render_image(fld, f.camera, config.n_samples, background), f.image) for f in frames]
    return float(np.mean(vals))


def probe_masks(fld, frames, config, background):
    """Whole-image inlier masks on probe frames, with the oracle for each."""
    out = []
    for f in frames:
        pred = render_image(fld, f.camera, config.n_samples, background)
        out.append((compute_image_mask(compute_residual_map(pred, f.image), config.mask), f.oracle_mask))
    return out


def probe_mask_iou(fld, frames, config, background):
    """Outlier-class IoU pooled over the probe frames."""
    pairs = probe_masks(fld, frames, config, background)
    pred = np.concatenate([~m.final[0].ravel() for m, _ in pairs])
    oracle = np.concatenate([o.ravel() for _, o in pairs])
    return compute_mask_metrics(pred, oracle)["iou"]


def run_training(config: TrainConfig, dataset, out_dir=None, callback=None) -> TrainResult:
    """Train a field on ``dataset``'s train split.

    Every ``log_interval`` steps a metrics row is recorded; every
    ``eval_interval`` steps (and at the end) it also carries the mean eval
    PSNR and, when oracle masks exist, the outlier-mask IoU on a few
    training frames. With ``out_dir`` the run writes ``metrics.csv``,
    optional mask dumps and the final checkpoint ``field.rfv``.
    """
    _kernels.configure_threads()
    t0 = time.perf_counter()
    bounds = dataset.spec.bounds
    background = np.asarray(dataset.spec.background, dtype=np.float64)
    train = dataset.train_frames
    if not train:
        raise TrainingError("dataset has no training frames")
    data = FrameRays.from_frames(train, bounds)
    evals = dataset.eval_frames
    probes = [f for f in train if f.oracle_mask is not None][: config.probe_frames]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = TrainState.initial(config, bounds)
    history, window = [], []
    for _ in range(config.steps):
        stats = train_step(state, data, config, background)
        window.append((stats.loss, stats.inlier_fraction))
        step = state.step
        last = step == config.steps
        if step % config.log_interval == 0 or last:
            row = {"step": step, "loss": float(np.mean([w[0] for w in window])),
                   "inlier_fraction": float(np.mean([w[1] for w in window])),
                   "lr": stats.lr, "eval_psnr": None, "mask_iou": None}
            window.clear()
            if (config.eval_interval and step % config.eval_interval == 0) or last:
                if evals:
                    row["eval_psnr"] = eval_psnr(state.field, evals, config, background)
                if probes:
                    row["mask_iou"] = probe_mask_iou(state.field, probes, config, background)
            history.append(row)
            logger.info("step %d loss %.5f inliers %.3f lr %.2e psnr %s", step, row["loss"],
                        row["inlier_fraction"], row["lr"], row["eval_psnr"])
            if callback is not None:
                callback(row, state)
        if out is not None and config.dump_masks and (step % config.dump_masks == 0 or last) and train:
            probe = probes[:1] or train[:1]
            (m, _), = probe_masks(state.field, probe, config, background)
            dump_mask_stages(m, out / "masks", step, tiled=False)

    state.field.check_finite()
    result = TrainResult(state.field, history, config, time.perf_counter() - t0)
    if out is not None:
        write_metrics(history, out / "metrics.csv")
        save_checkpoint(state.field, out / "field.rfv", {
            "config": config.to_dict(),
            "steps": state.step,
            "background": list(background),
            "scene_bounds": [list(bounds[0]), list(bounds[1])],
            "final": {k: v for k, v in history[-1].items()} if history else {},
        })
    return result


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_metrics(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow([_fmt(row.get(k)) for k in METRICS_HEADER])
    return path


def read_metrics(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append({k: (None if v == "" else (int(v) if k == "step" else float(v))) for k, v in rec.items()})
    return rows
