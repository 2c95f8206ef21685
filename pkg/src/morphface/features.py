"""Differentiable image feature extractors for the perceptual loss.

An extractor maps an (H, W, 3) image to a list of per-level feature vectors
and provides ``backward(image, grads)`` giving the image gradient.  The
built-in one is a Gaussian pyramid whose levels carry the blurred image and
its x/y forward differences; it is linear, so the adjoint is exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@lru_cache(maxsize=None)
def _blur_down(n):
    """(ceil(n/2), n) matrix: 5-tap binomial blur with replicated borders, then decimate."""
    B = np.zeros((n, n))
    for i in range(n):
        for k, w in zip(range(-2, 3), _KERNEL):
            B[i, min(max(i + k, 0), n - 1)] += w
    return B[::2].copy()


def _diff_adjoint(g, axis):
    """Adjoint of ``np.diff`` along ``axis``: maps (n-1) values back to n."""
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 1)
    return -np.diff(np.pad(g, pad), axis=axis)


def _apply(Ar, img, Ac):
    """Ar @ img @ Ac^T for every channel of an (H, W, C) image."""
    P = np.tensordot(Ar, img, axes=(1, 0))            # (h, W, C)
    return np.tensordot(P, Ac, axes=(1, 1)).transpose(0, 2, 1)


class PyramidFeatures:
    """Default perceptual extractor: 4-level Gaussian pyramid + image gradients."""

    def __init__(self, levels=4):
        self.levels = levels

    @lru_cache(maxsize=8)
    def _operators(self, H, W):
        ops = []
        Ar, Ac = np.eye(H), np.eye(W)
        for lvl in range(self.levels):
            if lvl > 0:
                Ar = _blur_down(Ar.shape[0]) @ Ar
                Ac = _blur_down(Ac.shape[0]) @ Ac
            ops.append((Ar, Ac))
        return ops

    def __call__(self, img):
        H, W, _ = img.shape
        feats = []
        for Ar, Ac in self._operators(H, W):
            P = _apply(Ar, img, Ac)
            parts = [P.ravel()]
            if P.shape[1] > 1:
                parts.append(np.diff(P, axis=1).ravel())
            if P.shape[0] > 1:
                parts.append(np.diff(P, axis=0).ravel())
            feats.append(np.concatenate(parts))
        return feats

    def backward(self, img, grads):
        H, W, _ = img.shape
        g_img = np.zeros_like(img, dtype=float)
        for (Ar, Ac), g in zip(self._operators(H, W), grads):
            h, w = Ar.shape[0], Ac.shape[0]
            n0 = h * w * 3
            gP = g[:n0].reshape(h, w, 3).copy()
            off = n0
            if w > 1:
                k = h * (w - 1) * 3
                gP += _diff_adjoint(g[off:off + k].reshape(h, w - 1, 3), 1)
                off += k
            if h > 1:
                k = (h - 1) * w * 3
                gP += _diff_adjoint(g[off:off + k].reshape(h - 1, w, 3), 0)
            g_img += _apply(Ar.T, gP, Ac.T)
        return g_img
