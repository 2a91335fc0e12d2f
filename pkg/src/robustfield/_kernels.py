"""Compiled per-ray kernels for batched rendering, its adjoint, and Adam.

These mirror the numpy reference path in ``field`` and ``render`` sample for
sample; tests cross-check the two. The adjoint runs single threaded so the
gradient summation order, and therefore training, is deterministic.
"""

from __future__ import annotations

import math
import os

import numba
import numpy as np
from numba import njit, prange

# TBB in this image is too old for numba; the workqueue layer needs nothing extra
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "workqueue")

SH_C0 = 0.28209479
SH_C1 = 0.48860251


def configure_threads():
    """Cap numba workers from ``ROBUSTFIELD_THREADS``; returns the count in use."""
    want = os.environ.get("ROBUSTFIELD_THREADS")
    if want:
        n = max(1, min(int(want), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
    return numba.get_num_threads()


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _basis(dx, dy, dz, n_sh, out):
    out[0] = SH_C0
    if n_sh == 4:
        out[1] = SH_C1 * dy
        out[2] = SH_C1 * dz
        out[3] = SH_C1 * dx


@njit(cache=True)
def _locate(px, py, pz, lo, scale, res, idx, frac):
    # grid cell and fractional offsets; False when outside the box
    for a in range(3):
        p = px if a == 0 else (py if a == 1 else pz)
        g = (p - lo[a]) * scale[a]
        if g < 0.0 or g > res[a] - 1:
            return False
        i = int(math.floor(g))
        if i > res[a] - 2:
            i = res[a] - 2
        idx[a] = i
        frac[a] = g - i
    return True


@njit(cache=True)
def _sample(params, ix, iy, iz, fx, fy, fz, vals):
    n_ch = vals.shape[0]
    for c in range(n_ch):
        vals[c] = 0.0
    for corner in range(8):
        cx = corner >> 2
        cy = (corner >> 1) & 1
        cz = corner & 1
        w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
        for c in range(n_ch):
            vals[c] += w * params[ix + cx, iy + cy, iz + cz, c]


@njit(cache=True)
def _eval_point(params, n_sh, basis, vals, rgb):
    # vals holds interpolated raw channels; returns sigma and fills rgb
    sigma = _softplus(vals[0])
    for k in range(3):
        s = 0.0
        for j in range(n_sh):
            s += vals[1 + k * n_sh + j] * basis[j]
        rgb[k] = _sigmoid(s)
    return sigma


@njit(cache=True)
def _render_one(params, lo, scale, res, n_sh, origins, dirs, tnear, tfar, n_samples, jitter,
                stratified, background, t_stop, out_rgb, out_trans, r, basis, vals, rgb, idx, frac):
    _basis(dirs[r, 0], dirs[r, 1], dirs[r, 2], n_sh, basis)
    tn = tnear[r]
    tf = tfar[r]
    acc0 = 0.0
    acc1 = 0.0
    acc2 = 0.0
    trans = 1.0
    if tf > tn:
        delta = (tf - tn) / n_samples
        for k in range(n_samples):
            u = jitter[r, k] if stratified else 0.5
            t = tn + (k + u) * delta
            px = origins[r, 0] + t * dirs[r, 0]
            py = origins[r, 1] + t * dirs[r, 1]
            pz = origins[r, 2] + t * dirs[r, 2]
            if _locate(px, py, pz, lo, scale, res, idx, frac):
                _sample(params, idx[0], idx[1], idx[2], frac[0], frac[1], frac[2], vals)
                sigma = _eval_point(params, n_sh, basis, vals, rgb)
            else:
                sigma = 0.0
                rgb[0] = 0.5
                rgb[1] = 0.5
                rgb[2] = 0.5
            alpha = 1.0 - math.exp(-sigma * delta)
            w = trans * alpha
            acc0 += w * rgb[0]
            acc1 += w * rgb[1]
            acc2 += w * rgb[2]
            trans *= 1.0 - alpha
            if trans < t_stop:
                break
    out_rgb[r, 0] = acc0 + trans * background[0]
    out_rgb[r, 1] = acc1 + trans * background[1]
    out_rgb[r, 2] = acc2 + trans * background[2]
    out_trans[r] = trans


@njit(cache=True, parallel=True)
def render_rays(params, lo, scale, res, n_sh, origins, dirs, tnear, tfar, n_samples,
                jitter, background, t_stop, out_rgb, out_trans):
    n_rays = origins.shape[0]
    n_ch = params.shape[3]
    stratified = jitter.shape[0] > 0
    # scratch buffers are allocated per chunk, not per ray
    chunk = 256
    n_chunks = (n_rays + chunk - 1) // chunk
    for c in prange(n_chunks):
        basis = np.empty(4)
        vals = np.empty(n_ch)
        rgb = np.empty(3)
        idx = np.empty(3, dtype=np.int64)
        frac = np.empty(3)
        for r in range(c * chunk, min(n_rays, (c + 1) * chunk)):
            _render_one(params, lo, scale, res, n_sh, origins, dirs, tnear, tfar, n_samples, jitter,
                        stratified, background, t_stop, out_rgb, out_trans, r, basis, vals, rgb, idx, frac)


@njit(cache=True)
def render_rays_backward(params, lo, scale, res, n_sh, origins, dirs, tnear, tfar, n_samples,
                         jitter, background, t_stop, d_rgb, grad):
    """Accumulate d(sum_r <d_rgb[r], C_r>)/d(params) into ``grad``."""
    n_rays = origins.shape[0]
    n_ch = params.shape[3]
    stratified = jitter.shape[0] > 0
    basis = np.empty(4)
    vals = np.empty(n_ch)
    rgb = np.empty(3)
    idx = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    sig = np.empty(n_samples)
    raw_d = np.empty(n_samples)
    col = np.empty((n_samples, 3))
    tk = np.empty(n_samples)
    inside = np.zeros(n_samples, dtype=np.bool_)
    alpha = np.empty(n_samples)
    trans_k = np.empty(n_samples)
    for r in range(n_rays):
        g0 = d_rgb[r, 0]
        g1 = d_rgb[r, 1]
        g2 = d_rgb[r, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        tn = tnear[r]
        tf = tfar[r]
        if not tf > tn:
            continue
        _basis(dirs[r, 0], dirs[r, 1], dirs[r, 2], n_sh, basis)
        delta = (tf - tn) / n_samples
        trans = 1.0
        used = 0
        for k in range(n_samples):
            u = jitter[r, k] if stratified else 0.5
            t = tn + (k + u) * delta
            tk[k] = t
            px = origins[r, 0] + t * dirs[r, 0]
            py = origins[r, 1] + t * dirs[r, 1]
            pz = origins[r, 2] + t * dirs[r, 2]
            if _locate(px, py, pz, lo, scale, res, idx, frac):
                inside[k] = True
                _sample(params, idx[0], idx[1], idx[2], frac[0], frac[1], frac[2], vals)
                sig[k] = _eval_point(params, n_sh, basis, vals, rgb)
                raw_d[k] = vals[0]
            else:
                inside[k] = False
                sig[k] = 0.0
                rgb[0] = 0.5
                rgb[1] = 0.5
                rgb[2] = 0.5
            col[k, 0] = rgb[0]
            col[k, 1] = rgb[1]
            col[k, 2] = rgb[2]
            alpha[k] = 1.0 - math.exp(-sig[k] * delta)
            trans_k[k] = trans
            trans *= 1.0 - alpha[k]
            used = k + 1
            if trans < t_stop:
                break
        # suffix radiance S_k = sum_{j>k} w_j c_j + T_final * background, dotted with d_rgb
        s_dot = trans * (background[0] * g0 + background[1] * g1 + background[2] * g2)
        for k in range(used - 1, -1, -1):
            w = trans_k[k] * alpha[k]
            c_dot = col[k, 0] * g0 + col[k, 1] * g1 + col[k, 2] * g2
            t_next = trans_k[k] * (1.0 - alpha[k])
            dsigma = delta * (t_next * c_dot - s_dot)
            s_dot += w * c_dot
            if not inside[k]:
                continue
            t = tk[k]
            px = origins[r, 0] + t * dirs[r, 0]
            py = origins[r, 1] + t * dirs[r, 1]
            pz = origins[r, 2] + t * dirs[r, 2]
            _locate(px, py, pz, lo, scale, res, idx, frac)
            draw = dsigma * _sigmoid(raw_d[k])
            ds0 = w * g0 * col[k, 0] * (1.0 - col[k, 0])
            ds1 = w * g1 * col[k, 1] * (1.0 - col[k, 1])
            ds2 = w * g2 * col[k, 2] * (1.0 - col[k, 2])
            fx = frac[0]
            fy = frac[1]
            fz = frac[2]
            for corner in range(8):
                cx = corner >> 2
                cy = (corner >> 1) & 1
                cz = corner & 1
                wc = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                ix = idx[0] + cx
                iy = idx[1] + cy
                iz = idx[2] + cz
                grad[ix, iy, iz, 0] += wc * draw
                for j in range(n_sh):
                    b = wc * basis[j]
                    grad[ix, iy, iz, 1 + j] += b * ds0
                    grad[ix, iy, iz, 1 + n_sh + j] += b * ds1
                    grad[ix, iy, iz, 1 + 2 * n_sh + j] += b * ds2


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam step on flat arrays; ``step`` counts from 1."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
