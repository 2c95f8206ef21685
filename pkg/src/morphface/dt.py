"""Exact Euclidean distance transforms and a C1 sampler for them."""

from __future__ import annotations

import numpy as np
from numba import njit

_INF = 1e20


@njit(cache=True)
def _dt1d(f, out, v, z):
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit(cache=True)
def _edt_sq(f):
    H, W = f.shape
    tmp = np.empty((H, W))
    out = np.empty((H, W))
    n = max(H, W)
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1)
    col = np.empty(H)
    res = np.empty(H)
    for c in range(W):
        for r in range(H):
            col[r] = f[r, c]
        _dt1d(col, res, v, z)
        for r in range(H):
            tmp[r, c] = res[r]
    row = np.empty(W)
    res2 = np.empty(W)
    for r in range(H):
        for c in range(W):
            row[c] = tmp[r, c]
        _dt1d(row, res2, v, z)
        for c in range(W):
            out[r, c] = res2[c]
    return out


def squared_edt(mask):
    """Squared Euclidean distance from every pixel to the nearest True pixel of ``mask``.

    Two separable passes of the lower-envelope-of-parabolas transform.  Returns
    None when ``mask`` has no True pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    f = np.where(mask, 0.0, _INF)
    return _edt_sq(f)


def distance_transform(mask):
    sq = squared_edt(mask)
    return None if sq is None else np.sqrt(sq)


def brute_force_edt(mask):
    """O(P^2) reference used by the tests."""
    pts = np.argwhere(mask)
    if len(pts) == 0:
        return None
    rr, cc = np.indices(mask.shape)
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1)
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1).min(axis=1)
    return np.sqrt(d2.reshape(mask.shape).astype(float))


def _cr_weights(t):
    t2, t3 = t * t, t * t * t
    w = np.stack([-t + 2 * t2 - t3, 2 - 5 * t2 + 3 * t3, t + 4 * t2 - 3 * t3, -t2 + t3], axis=-1) * 0.5
    dw = np.stack([-1 + 4 * t - 3 * t2, -10 * t + 9 * t2, 1 + 8 * t - 9 * t2, -2 * t + 3 * t2], axis=-1) * 0.5
    return w, dw


def sample(D, pts):
    """Catmull-Rom value and gradient of image ``D`` at pixel coordinates ``pts`` (K, 2).

    Pixel (r, c) has its centre at (c + 0.5, r + 0.5); values at centres are
    reproduced exactly and the interpolant is C1, so its derivative is
    continuous across pixel centres.  Indices are clamped at the border.
    """
    H, W = D.shape
    gx = pts[:, 0] - 0.5
    gy = pts[:, 1] - 0.5
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    wx, dwx = _cr_weights(gx - ix)
    wy, dwy = _cr_weights(gy - iy)
    offs = np.arange(-1, 3)
    cols = np.clip(ix[:, None] + offs, 0, W - 1)
    rows = np.clip(iy[:, None] + offs, 0, H - 1)
    patch = D[rows[:, :, None], cols[:, None, :]]          # (K, 4, 4)
    val = np.einsum("ki,kij,kj->k", wy, patch, wx)
    ddx = np.einsum("ki,kij,kj->k", wy, patch, dwx)
    ddy = np.einsum("ki,kij,kj->k", dwy, patch, wx)
    return val, np.column_stack([ddx, ddy])
