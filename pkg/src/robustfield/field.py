"""Trainable voxel radiance field.

Density and spherical-harmonic color coefficients live on the vertices of a
regular grid spanning an axis-aligned box and are trilinearly interpolated.
Activations: ``sigma = softplus(raw)``, ``rgb = sigmoid(sum_j coeff_j Y_j(d))``.

Both parameter blocks are views into one packed ``(nx, ny, nz, 1 + 3 n_sh)``
array so optimizers and the compiled render kernels see a single buffer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import _serialize

SH_C0 = 0.28209479
SH_C1 = 0.48860251
UNIT_TOL = 1e-6

CHECKPOINT_MAGIC = b"RFVOXEL\0"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI3I6dI")


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    return np.log(np.expm1(y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def sh_basis(d, sh_degree):
    """Real SH basis values for unit directions ``(..., 3)`` -> ``(..., n_sh)``."""
    d = np.asarray(d, dtype=np.float64)
    c0 = np.full(d.shape[:-1] + (1,), SH_C0)
    if sh_degree == 0:
        return c0
    x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
    return np.concatenate([c0, SH_C1 * y, SH_C1 * z, SH_C1 * x], axis=-1)


class VoxelField:
    """Density + SH color grid over ``bounds = (lo, hi)``."""

    def __init__(self, resolution, bounds, sh_degree=1, params=None, dtype=np.float64):
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"resolution must be >= 2 on every axis, got {resolution}")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ValueError("bounds must be a non-degenerate (lo, hi) box")
        if sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")
        self.resolution = res
        self.lo, self.hi = lo, hi
        self.sh_degree = int(sh_degree)
        shape = res + (self.n_channels,)
        if params is None:
            params = np.zeros(shape, dtype=dtype)
        params = np.ascontiguousarray(params)
        if params.shape != shape:
            raise ValueError(f"parameter array has shape {params.shape}, expected {shape}")
        self.params = params

    @property
    def n_sh(self):
        return (self.sh_degree + 1) ** 2

    @property
    def n_channels(self):
        return 1 + 3 * self.n_sh

    @property
    def bounds(self):
        return self.lo, self.hi

    @property
    def density_raw(self):
        return self.params[..., 0]

    @property
    def color_coeffs(self):
        return self.params[..., 1:].reshape(self.resolution + (3, self.n_sh))

    def copy(self):
        return VoxelField(self.resolution, (self.lo, self.hi), self.sh_degree, self.params.copy())

    def astype(self, dtype):
        return VoxelField(self.resolution, (self.lo, self.hi), self.sh_degree, self.params.astype(dtype))

    def check_finite(self):
        if not np.all(np.isfinite(self.params)):
            raise FloatingPointError("field parameters contain non-finite values")

    def __repr__(self):
        return (f"VoxelField(resolution={self.resolution}, sh_degree={self.sh_degree}, "
                f"dtype={self.params.dtype})")


class FieldGradient:
    """Additive accumulator shaped like a field's packed parameters."""

    def __init__(self, field: VoxelField, dtype=None):
        self.resolution = field.resolution
        self.n_sh = field.n_sh
        self.data = np.zeros_like(field.params, dtype=dtype or field.params.dtype)

    @property
    def density_raw(self):
        return self.data[..., 0]

    @property
    def color_coeffs(self):
        return self.data[..., 1:].reshape(self.resolution + (3, self.n_sh))

    def check(self, field: VoxelField):
        if self.data.shape != field.params.shape:
            raise ValueError(f"gradient shape {self.data.shape} does not match field {field.params.shape}")

    def zero(self):
        self.data[...] = 0.0
        return self


def create_field(resolution=(64, 64, 64), bounds=((-1.5,) * 3, (1.5,) * 3), sh_degree=1,
                 init_density=0.1, dtype=np.float64) -> VoxelField:
    """Constant density ``init_density`` per world unit, zero (gray) color."""
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    field = VoxelField(resolution, bounds, sh_degree, dtype=dtype)
    field.params[..., 0] = inverse_softplus(init_density)
    return field


def _grid_coords(field, x):
    g = (x - field.lo) / (field.hi - field.lo) * (np.asarray(field.resolution) - 1)
    inside = np.all((g >= 0) & (g <= np.asarray(field.resolution) - 1), axis=-1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, np.asarray(field.resolution) - 2)
    return i0, g - i0, inside


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def trilinear_weights(field: VoxelField, x):
    """Corner indices ``(N, 8, 3)``, weights ``(N, 8)`` and in-bounds flags."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    i0, f, inside = _grid_coords(field, x)
    idx = i0[:, None, :] + _CORNERS[None]
    w = np.prod(np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=-1)
    return idx, w, inside


def _check_dirs(d):
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > UNIT_TOL):
        raise ValueError("view directions must be unit vectors")
    return d


def _interp_raw(field, x):
    idx, w, inside = trilinear_weights(field, x)
    vals = field.params[idx[..., 0], idx[..., 1], idx[..., 2]]  # (N, 8, C)
    return np.einsum("nk,nkc->nc", w, vals.astype(np.float64)), idx, w, inside


def query_field(field: VoxelField, x, d):
    """Density ``(N,)`` and RGB ``(N, 3)`` at points ``x`` seen along ``d``.

    Points outside the bounds get ``sigma = 0`` and gray color.
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.broadcast_to(_check_dirs(d), x.shape)
    raw, _, _, inside = _interp_raw(field, x)
    sigma = np.where(inside, softplus(raw[:, 0]), 0.0)
    coeffs = raw[:, 1:].reshape(-1, 3, field.n_sh)
    rgb = sigmoid(np.einsum("nkj,nj->nk", coeffs, sh_basis(d, field.sh_degree)))
    rgb = np.where(inside[:, None], rgb, 0.5)
    if single:
        return float(sigma[0]), rgb[0]
    return sigma, rgb


def query_field_adjoint(field: VoxelField, x, d, dsigma, dc, accum: FieldGradient):
    """Add d(<dsigma, sigma> + <dc, rgb>)/d(params) into ``accum``."""
    accum.check(field)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.broadcast_to(_check_dirs(d), x.shape)
    dsigma = np.broadcast_to(np.asarray(dsigma, dtype=np.float64).reshape(-1), (len(x),))
    dc = np.broadcast_to(np.asarray(dc, dtype=np.float64).reshape(-1, 3), (len(x), 3))
    raw, idx, w, inside = _interp_raw(field, x)
    basis = sh_basis(d, field.sh_degree)
    coeffs = raw[:, 1:].reshape(-1, 3, field.n_sh)
    rgb = sigmoid(np.einsum("nkj,nj->nk", coeffs, basis))

    draw = np.zeros_like(raw)
    draw[:, 0] = dsigma * sigmoid(raw[:, 0])
    ds = dc * rgb * (1.0 - rgb)
    draw[:, 1:] = (ds[:, :, None] * basis[:, None, :]).reshape(len(x), -1)
    draw[~inside] = 0.0
    contrib = w[:, :, None] * draw[:, None, :]  # (N, 8, C)
    np.add.at(accum.data, (idx[..., 0], idx[..., 1], idx[..., 2]), contrib)
    return accum


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(field: VoxelField, path, metadata=None):
    """Binary header + little-endian float32 density then color; JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *field.resolution,
                          *field.lo, *field.hi, field.sh_degree)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(field.density_raw, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(field.color_coeffs, dtype="<f4").tobytes())
    side = dict(metadata or {})
    side.setdefault("resolution", list(field.resolution))
    side.setdefault("sh_degree", field.sh_degree)
    _serialize.dump(side, sidecar_path(path))
    return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(field, metadata)``; parameters are exactly the stored float32 values."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, nx, ny, nz, *rest = _HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a voxel field checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    lo, hi, sh_degree = rest[:3], rest[3:6], rest[6]
    field = VoxelField((nx, ny, nz), (lo, hi), sh_degree, dtype=dtype)
    n_vox = nx * ny * nz
    expected = _HEADER.size + 4 * n_vox * field.n_channels
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    off = _HEADER.size
    dens = np.frombuffer(buf, dtype="<f4", count=n_vox, offset=off)
    col = np.frombuffer(buf, dtype="<f4", count=n_vox * 3 * field.n_sh, offset=off + 4 * n_vox)
    field.params[..., 0] = dens.reshape(nx, ny, nz)
    field.params[..., 1:] = col.reshape(nx, ny, nz, 3 * field.n_sh)
    side = sidecar_path(path)
    metadata = json.loads(side.read_text()) if side.exists() else {}
    return field, metadata
