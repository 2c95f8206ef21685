"""Z-buffer rasterizer with barycentric backpropagation.

Forward: pixel-centre sampling, top-left fill rule, nearest depth wins, ties
go to the lower triangle index.  Barycentrics are perspective correct, so
interpolating camera-space vertices reproduces the pixel ray's intersection.

Backward: visibility is held fixed.  A pixel's colour is sum_k b_k C_k with
b = w / sum(w), w = M^-1 d, M the 3x3 matrix of camera-space triangle
vertices and d the pixel ray; gradients flow into C through b and into the
vertex positions through b's dependence on M.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .mesh import scatter_add
from .scene import NEAR, project, project_backward

BACKGROUND = 0.0


@njit(cache=True)
def _raster_kernel(P, Z, tris, width, height, tri_id, depth, lam):
    T = tris.shape[0]
    for t in range(T):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0, z1, z2 = Z[i0], Z[i1], Z[i2]
        if z0 <= NEAR or z1 <= NEAR or z2 <= NEAR:
            continue
        x0, y0 = P[i0, 0], P[i0, 1]
        x1, y1 = P[i1, 0], P[i1, 1]
        x2, y2 = P[i2, 0], P[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-14:
            continue
        sgn = 1.0 if area > 0 else -1.0
        aabs = area * sgn
        cmin = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        cmax = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        rmin = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        rmax = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if cmin > cmax or rmin > rmax:
            continue
        # effective edge vectors (interior on the positive side)
        d0x, d0y = sgn * (x2 - x1), sgn * (y2 - y1)
        d1x, d1y = sgn * (x0 - x2), sgn * (y0 - y2)
        d2x, d2y = sgn * (x1 - x0), sgn * (y1 - y0)
        tl0 = (-d0y > 0) or (d0y == 0 and d0x > 0)
        tl1 = (-d1y > 0) or (d1y == 0 and d1x > 0)
        tl2 = (-d2y > 0) or (d2y == 0 and d2x > 0)
        for r in range(rmin, rmax + 1):
            py = r + 0.5
            for c in range(cmin, cmax + 1):
                px = c + 0.5
                w0 = d0x * (py - y1) - d0y * (px - x1)
                w1 = d1x * (py - y2) - d1y * (px - x2)
                w2 = d2x * (py - y0) - d2y * (px - x0)
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                if (w0 == 0 and not tl0) or (w1 == 0 and not tl1) or (w2 == 0 and not tl2):
                    continue
                l0, l1, l2 = w0 / aabs, w1 / aabs, w2 / aabs
                zz = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
                if zz < depth[r, c]:
                    depth[r, c] = zz
                    tri_id[r, c] = t
                    lam[r, c, 0] = l0 * zz / z0
                    lam[r, c, 1] = l1 * zz / z1
                    lam[r, c, 2] = l2 * zz / z2


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3) unclamped; clamp with .image()
    mask: np.ndarray       # (H, W) bool
    tri_id: np.ndarray     # (H, W) int, -1 where empty
    bary: np.ndarray       # (H, W, 3) perspective-correct
    depth: np.ndarray      # (H, W) camera z, inf where empty
    vcam: np.ndarray = field(repr=False, default=None)
    colors: np.ndarray = field(repr=False, default=None)
    triangles: np.ndarray = field(repr=False, default=None)
    camera: object = field(repr=False, default=None)

    def image(self):
        return np.clip(self.color, 0.0, 1.0)

    def label_image(self, triangle_labels):
        """Map each covered pixel to the label of its triangle (0 elsewhere)."""
        out = np.zeros(self.tri_id.shape, dtype=np.int64)
        out[self.mask] = np.asarray(triangle_labels)[self.tri_id[self.mask]]
        return out


class StaleBuffersError(ValueError):
    pass


def rasterize(vcam, triangles, camera):
    """Visibility only: (tri_id, bary, depth) for camera-space vertices."""
    vcam = np.ascontiguousarray(vcam, dtype=np.float64)
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    H, W = camera.height, camera.width
    z = vcam[:, 2]
    safe = np.where(z > NEAR, z, 1.0)
    f = camera.focal
    cx, cy = camera.principal
    P = np.column_stack([cx + f * vcam[:, 0] / safe, cy + f * vcam[:, 1] / safe])
    tri_id = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    lam = np.zeros((H, W, 3))
    _raster_kernel(P, z.copy(), tris, W, H, tri_id, depth, lam)
    return tri_id, lam, depth


def interpolate(tri_id, bary, triangles, attrs, background=BACKGROUND):
    mask = tri_id >= 0
    out = np.full(tri_id.shape + (attrs.shape[1],), background, dtype=float)
    vid = triangles[tri_id[mask]]
    b = bary[mask]
    out[mask] = np.einsum("pk,pkc->pc", b, attrs[vid])
    return out


def render(vcam, triangles, colors, camera):
    """Render per-vertex ``colors`` of a mesh already in camera space."""
    tri_id, bary, depth = rasterize(vcam, triangles, camera)
    colors = np.asarray(colors, dtype=float)
    color = interpolate(tri_id, bary, triangles, colors)
    return RenderOutput(color=color, mask=tri_id >= 0, tri_id=tri_id, bary=bary, depth=depth,
                        vcam=np.asarray(vcam, dtype=float), colors=colors,
                        triangles=np.asarray(triangles), camera=camera)


def pixel_rays(rows, cols, camera):
    f = camera.focal
    cx, cy = camera.principal
    return np.column_stack([(cols + 0.5 - cx) / f, (rows + 0.5 - cy) / f, np.ones(len(rows))])


def backward(out, g_S):
    """dL/dS (H, W, 3) -> (dL/dvcam (N, 3), dL/dcolors (N, 3)); visibility held fixed."""
    g_S = np.asarray(g_S, dtype=float)
    if g_S.shape != out.color.shape:
        raise StaleBuffersError(f"gradient shape {g_S.shape} does not match render {out.color.shape}")
    vcam, C, tris = out.vcam, out.colors, out.triangles
    N = len(vcam)
    rows, cols = np.nonzero(out.mask)
    if len(rows) == 0:
        return np.zeros_like(vcam), np.zeros_like(C)
    g = g_S[rows, cols]
    vid = tris[out.tri_id[rows, cols]]
    b = out.bary[rows, cols]
    g_C = scatter_add(vid, b[:, :, None] * g[:, None, :], N)
    g_b = np.einsum("pkc,pc->pk", C[vid], g)
    M = np.transpose(vcam[vid], (0, 2, 1))        # columns are the triangle's vertices
    d = pixel_rays(rows, cols, out.camera)
    w = np.linalg.solve(M, d[:, :, None])[:, :, 0]
    s = w.sum(axis=1)
    bb = w / s[:, None]
    g_w = (g_b - np.sum(g_b * bb, axis=1, keepdims=True)) / s[:, None]
    y = np.linalg.solve(np.transpose(M, (0, 2, 1)), g_w[:, :, None])[:, :, 0]
    g_v = scatter_add(vid, -w[:, :, None] * y[:, None, :], N)
    return g_v, g_C


# ---------------------------------------------------------------------------
# lip contours

CONTOUR_KEYS = (("upper", "outer"), ("upper", "inner"), ("lower", "outer"), ("lower", "inner"))


def lip_boundary_masks(labels):
    """Per-(lip, side) boundary masks of a label image {0, 1 = upper, 2 = lower}.

    Upper lip: pixels whose upper neighbour is not upper lip form the outer
    contour and pixels whose lower neighbour is not upper lip form the inner
    one.  The lower lip mirrors this.
    """
    labels = np.asarray(labels)
    out = {}
    for lip, lab in (("upper", 1), ("lower", 2)):
        m = labels == lab
        above = np.zeros_like(m)
        above[1:] = m[:-1]
        below = np.zeros_like(m)
        below[:-1] = m[1:]
        top = m & ~above
        bottom = m & ~below
        if lip == "upper":
            out[(lip, "outer")], out[(lip, "inner")] = top, bottom
        else:
            out[(lip, "inner")], out[(lip, "outer")] = top, bottom
    return out


@dataclass
class ContourPoints:
    """Mesh contour samples as fixed combinations of projected vertices."""
    vertex_ids: np.ndarray   # (K, 3)
    weights: np.ndarray      # (K, 3)
    positions: np.ndarray    # (K, 2) pixel coordinates at evaluation time

    def __len__(self):
        return len(self.positions)

    def backward(self, vcam, camera, g_pos):
        """Scatter dL/dpositions (K, 2) onto camera-space vertices (N, 3)."""
        if len(self) == 0:
            return np.zeros_like(vcam)
        ids = self.vertex_ids.ravel()
        gp = (self.weights[:, :, None] * g_pos[:, None, :]).reshape(-1, 2)
        return scatter_add(ids, project_backward(vcam[ids], camera, gp), len(vcam))


def _empty_contour():
    return ContourPoints(np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros((0, 2)))


def _ring_samples(ring, proj, per_edge):
    a, b = ring[:-1], ring[1:]
    ts = np.arange(per_edge) / per_edge
    va = np.repeat(a, per_edge)
    vb = np.repeat(b, per_edge)
    t = np.tile(ts, len(a))
    ids = np.column_stack([va, vb, va])
    w = np.column_stack([1 - t, t, np.zeros_like(t)])
    ids = np.vstack([ids, [[ring[-1], ring[-1], ring[-1]]]])
    w = np.vstack([w, [[1.0, 0.0, 0.0]]])
    pos = np.einsum("kj,kjc->kc", w, proj[ids])
    return ContourPoints(ids, w, pos)


def visible_samples(points, depth_at, out, depth_tol):
    """Mask of screen samples not hidden behind nearer geometry.

    A sample is hidden when the rendered surface at its pixel is more than
    ``depth_tol`` nearer than the sample itself.  Samples off-screen are dropped;
    samples over background are kept.
    """
    H, W = out.depth.shape
    c = np.floor(points[:, 0]).astype(np.int64)
    r = np.floor(points[:, 1]).astype(np.int64)
    inside = (c >= 0) & (c < W) & (r >= 0) & (r < H)
    keep = inside.copy()
    rr, cc = r[inside], c[inside]
    keep[inside] = depth_at[inside] <= out.depth[rr, cc] + depth_tol
    return keep


def extract_mesh_lip_contours(out, template, per_edge=2, depth_tol=2.0):
    """The four mesh lip contours of a render, keyed by (lip, side).

    Each contour is its lip ring projected to the image, sampled ``per_edge``
    times per ring edge, with samples hidden by nearer geometry removed.  The
    positions are smooth functions of the vertices; only the visibility
    selection is discrete, like the rasterizer's.
    """
    vcam, camera = out.vcam, out.camera
    if not (out.label_image(template.triangle_lip_labels) > 0).any():
        return {key: _empty_contour() for key in CONTOUR_KEYS}
    proj = project(np.where(vcam[:, 2:3] > NEAR, vcam, [0.0, 0.0, 1.0]), camera)
    res = {}
    for lip, side in CONTOUR_KEYS:
        pts = _ring_samples(template.lip_rings[f"{lip}_{side}"], proj, per_edge)
        z = np.einsum("kj,kj->k", pts.weights, vcam[pts.vertex_ids, 2])
        keep = visible_samples(pts.positions, z, out, depth_tol)
        res[(lip, side)] = ContourPoints(pts.vertex_ids[keep], pts.weights[keep], pts.positions[keep])
    return res
