"""Inspection images: geometry and albedo renders, normal maps and side-by-side panels."""

from __future__ import annotations

import numpy as np

from .mesh import compute_normals
from .objective import forward_frame, reflectance
from .raster import interpolate, render
from .scene import shade

_GREY_LIGHT = np.zeros((3, 9))
_GREY_LIGHT[:, 0] = 0.45 / 0.2820948
_GREY_LIGHT[:, 2] = -0.55 / 0.4886025
_GREY_LIGHT[:, 1] = -0.15 / 0.4886025


def geometry_render(rig, state):
    """Grey clay shading of the posed mesh under a fixed key light."""
    grey = np.full_like(state.V, 0.8)
    C = shade(grey, state.normals, _GREY_LIGHT)
    return render(state.vcam, rig.template.triangles, C, rig.camera).image()


def albedo_render(rig, model, params, state):
    R = reflectance(rig, model, params.beta)
    return np.clip(interpolate(state.out.tri_id, state.out.bary, rig.template.triangles, R), 0, 1)


def normal_map(rig, state):
    """Camera-space normals mapped from [-1, 1] to [0, 1]; background stays black."""
    n = compute_normals(state.vcam, rig.template.triangles)
    img = interpolate(state.out.tri_id, state.out.bary, rig.template.triangles, n)
    norm = np.linalg.norm(img, axis=2, keepdims=True)
    img = np.where(norm > 0, img / np.maximum(norm, 1e-12), 0.0)
    return np.where(state.out.mask[:, :, None], 0.5 * (img + 1.0), 0.0)


def overlay(image, geometry, mask, alpha=0.5):
    out = image.copy()
    out[mask] = (1 - alpha) * image[mask] + alpha * geometry[mask]
    return out


def panel(rig, model, params, i, image=None):
    """(H, 4W, 3) strip: input | geometry | albedo | overlay for frame ``i``."""
    st = forward_frame(rig, model, params, i)
    geo = geometry_render(rig, st)
    alb = albedo_render(rig, model, params, st)
    inp = st.out.image() if image is None else np.asarray(image, dtype=float)
    return np.concatenate([inp, geo, alb, overlay(inp, geo, st.out.mask)], axis=1), st
