"""Pinhole rays and emission-absorption volume rendering with adjoints.

Each ray's ``[t_near, t_far]`` interval is split into ``n_samples`` equal
bins; a sample sits at the bin midpoint (deterministic) or at a uniform
jitter inside it (stratified) and represents the whole bin, so every
interval length equals the bin width. Marching stops once transmittance
drops below ``T_STOP``; the adjoint stops at the same sample.

``render_pixel``/``render_pixel_adjoint`` are the readable numpy reference.
``render_rays``/``render_rays_backward`` run the same arithmetic through
compiled kernels for whole batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .camera import CameraModel
from .field import FieldGradient, VoxelField, query_field, query_field_adjoint
from .imageio import write_png, write_ppm

T_STOP = 1e-6
MIN_NEAR = 0.05


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be a unit vector")
        if not 0.0 <= self.t_near <= self.t_far:
            raise ValueError(f"bad ray interval [{self.t_near}, {self.t_far}]")

    @property
    def empty(self):
        return not self.t_far > self.t_near

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class RenderSample:
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    rgb: np.ndarray
    final_transmittance: float

    @property
    def weights(self):
        return self.transmittance * self.alpha


def box_interval(origins, dirs, lo, hi, min_near=MIN_NEAR):
    """Slab intersection with the box; misses get an empty interval."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    safe = np.where(np.abs(dirs) < 1e-15, np.where(dirs < 0, -1e-15, 1e-15), dirs)
    ta, tb = (lo - origins) / safe, (hi - origins) / safe
    tnear = np.maximum(np.minimum(ta, tb).max(axis=1), min_near)
    tfar = np.maximum(ta, tb).min(axis=1)
    tfar = np.where(tfar > tnear, tfar, tnear)
    return tnear, tfar


def generate_ray(camera: CameraModel, pixel, bounds, min_near=MIN_NEAR) -> Ray:
    """Ray through continuous pixel coordinates ``(u, v)``."""
    camera.validate()
    u, v = pixel
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel {pixel} lies outside the image")
    dc = np.array([(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -1.0])
    d = camera.rotation @ dc
    d /= np.linalg.norm(d)
    o = camera.position.copy()
    tn, tf = box_interval(o[None], d[None], np.asarray(bounds[0]), np.asarray(bounds[1]), min_near)
    return Ray(o, d, float(tn[0]), float(tf[0]))


def camera_rays(camera: CameraModel, bounds, min_near=MIN_NEAR):
    """Per-pixel ``(origins, dirs, t_near, t_far)``, flattened row-major."""
    camera.validate()
    d = camera.pixel_directions().reshape(-1, 3)
    o = np.ascontiguousarray(np.broadcast_to(camera.position, d.shape))
    tn, tf = box_interval(o, d, np.asarray(bounds[0]), np.asarray(bounds[1]), min_near)
    return o, np.ascontiguousarray(d), tn, tf


def _sample_positions(ray: Ray, n_samples, rng):
    delta = (ray.t_far - ray.t_near) / n_samples
    u = rng.random(n_samples) if rng is not None else np.full(n_samples, 0.5)
    return ray.t_near + (np.arange(n_samples) + u) * delta, delta


def render_pixel(field: VoxelField, ray: Ray, n_samples=64, rng=None, background=(0.0, 0.0, 0.0)) -> RenderSample:
    """Composite one ray; ``rng`` switches on stratified jitter."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    bg = np.asarray(background, dtype=np.float64)
    if ray.empty:
        z = np.zeros(0)
        return RenderSample(z, z, z, np.zeros((0, 3)), z, z, bg.copy(), 1.0)
    t, delta = _sample_positions(ray, n_samples, rng)
    sigma, color = query_field(field, ray.at(t), ray.direction)
    alpha, trans, rgb, T = composite(sigma, color, delta, bg)
    used = len(alpha)
    return RenderSample(t[:used], np.full(used, delta), sigma[:used], color[:used], alpha, trans, rgb, T)


def composite(sigma, color, delta, background=(0.0, 0.0, 0.0)):
    """Emission-absorption compositing of samples along one ray.

    Returns ``(alpha, transmittance, rgb, final_transmittance)`` truncated at
    the early-stop sample.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    alpha = 1.0 - np.exp(-sigma * np.asarray(delta, dtype=np.float64))
    n = len(sigma)
    trans = np.empty(n)
    T, used = 1.0, n
    for k in range(n):
        trans[k] = T
        T *= 1.0 - alpha[k]
        if T < T_STOP:
            used = k + 1
            break
    w = trans[:used] * alpha[:used]
    rgb = w @ color[:used] + T * np.asarray(background, dtype=np.float64)
    return alpha[:used], trans[:used], rgb, T


def render_pixel_adjoint(field: VoxelField, ray: Ray, sample: RenderSample, d_rgb,
                         accum: FieldGradient, background=(0.0, 0.0, 0.0)) -> FieldGradient:
    """Reverse-mode pass for one ray: adds dC/dparams . d_rgb into ``accum``.

    ``sample`` must come from ``render_pixel`` on the same, unmodified field.
    """
    accum.check(field)
    g = np.asarray(d_rgb, dtype=np.float64)
    if not np.any(g) or len(sample.t) == 0:
        return accum
    bg = np.asarray(background, dtype=np.float64)
    w = sample.weights
    c_dot = sample.color @ g
    # S_k = sum_{j>k} w_j c_j + T_final * bg, projected on g
    tail = np.concatenate([np.cumsum((w * c_dot)[::-1])[::-1][1:], [0.0]])
    s_dot = tail + sample.final_transmittance * (bg @ g)
    t_next = sample.transmittance * (1.0 - sample.alpha)
    dsigma = sample.delta * (t_next * c_dot - s_dot)
    dc = w[:, None] * g[None, :]
    return query_field_adjoint(field, ray.at(sample.t), ray.direction, dsigma, dc, accum)


# --------------------------------------------------------------------------
# batched path


def _grid_args(field: VoxelField):
    res = np.asarray(field.resolution, dtype=np.int64)
    scale = (res - 1) / (field.hi - field.lo)
    return field.params, field.lo, scale, res, field.n_sh


def _jitter(jitter, n_samples):
    if jitter is None:
        return np.zeros((0, n_samples))
    return np.ascontiguousarray(jitter, dtype=np.float64)


def render_rays(field: VoxelField, origins, dirs, tnear, tfar, n_samples=64, jitter=None,
                background=(0.0, 0.0, 0.0)):
    """Batched forward pass; returns ``(rgb (R, 3), final transmittance (R,))``."""
    n = len(origins)
    out_rgb = np.empty((n, 3))
    out_t = np.empty(n)
    params, lo, scale, res, n_sh = _grid_args(field)
    _kernels.render_rays(params, lo, scale, res, n_sh,
                         np.ascontiguousarray(origins, dtype=np.float64),
                         np.ascontiguousarray(dirs, dtype=np.float64),
                         np.ascontiguousarray(tnear, dtype=np.float64),
                         np.ascontiguousarray(tfar, dtype=np.float64),
                         int(n_samples), _jitter(jitter, n_samples),
                         np.asarray(background, dtype=np.float64), T_STOP, out_rgb, out_t)
    return out_rgb, out_t


def render_rays_backward(field: VoxelField, origins, dirs, tnear, tfar, d_rgb, accum: FieldGradient,
                         n_samples=64, jitter=None, background=(0.0, 0.0, 0.0)):
    """Batched adjoint; ``jitter`` must match the forward call."""
    accum.check(field)
    params, lo, scale, res, n_sh = _grid_args(field)
    _kernels.render_rays_backward(params, lo, scale, res, n_sh,
                                  np.ascontiguousarray(origins, dtype=np.float64),
                                  np.ascontiguousarray(dirs, dtype=np.float64),
                                  np.ascontiguousarray(tnear, dtype=np.float64),
                                  np.ascontiguousarray(tfar, dtype=np.float64),
                                  int(n_samples), _jitter(jitter, n_samples),
                                  np.asarray(background, dtype=np.float64), T_STOP,
                                  np.ascontiguousarray(d_rgb, dtype=np.float64), accum.data)
    return accum


def render_image(field: VoxelField, camera: CameraModel, n_samples=64, background=(0.0, 0.0, 0.0),
                 min_near=MIN_NEAR):
    """Deterministic (midpoint) render of a full frame, ``(H, W, 3)``."""
    o, d, tn, tf = camera_rays(camera, field.bounds, min_near)
    rgb, _ = render_rays(field, o, d, tn, tf, n_samples, None, background)
    return np.clip(rgb, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def write_render(image, out_dir, frame, step, png=False):
    out_dir = Path(out_dir)
    path = write_ppm(out_dir / f"render_{frame}_{step}.ppm", image)
    if png:
        write_png(out_dir / f"render_{frame}_{step}.png", image)
    return path
