"""Triangle-mesh helpers: vertex normals (with their adjoint), edge graphs, geodesics."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def scatter_add(index, values, n):
    """Row-wise ``out[index[i]] += values[i]`` for (K, C) values into (n, C); deterministic."""
    index = np.asarray(index).ravel()
    values = np.asarray(values, dtype=float).reshape(len(index), -1)
    return np.column_stack([np.bincount(index, weights=values[:, c], minlength=n)
                            for c in range(values.shape[1])])


def _vertex_sum(triangles, fc, n):
    return scatter_add(np.asarray(triangles).ravel(), np.repeat(fc, 3, axis=0), n)


def _face_cross(V, triangles):
    v0 = V[triangles[:, 0]]
    v1 = V[triangles[:, 1]]
    v2 = V[triangles[:, 2]]
    return v0, v1, v2, np.cross(v1 - v0, v2 - v0)


def compute_normals(V, triangles, eps=1e-12):
    """Area-weighted unit vertex normals.

    The unnormalized face cross product is twice the face area times its unit
    normal, so summing it per vertex gives the area weighting for free.
    Vertices with a vanishing accumulated normal get ``FALLBACK_NORMAL``.
    """
    V = np.asarray(V, dtype=float)
    _, _, _, fc = _face_cross(V, triangles)
    acc = _vertex_sum(triangles, fc, len(V))
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= eps
    if bad.any():
        warnings.warn(f"{int(bad.sum())} vertices have zero-area normals; using fallback",
                      RuntimeWarning, stacklevel=2)
        acc[bad] = FALLBACK_NORMAL
        norm[bad] = 1.0
    return acc / norm[:, None]


def normals_backward(V, triangles, grad_n, eps=1e-12):
    """Vector-Jacobian product of :func:`compute_normals` w.r.t. ``V``."""
    V = np.asarray(V, dtype=float)
    v0, v1, v2, fc = _face_cross(V, triangles)
    acc = _vertex_sum(triangles, fc, len(V))
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= eps
    norm[bad] = 1.0
    n = acc / norm[:, None]
    # d(a/|a|) = (I - n n^T) da / |a|
    g_acc = (grad_n - n * np.sum(grad_n * n, axis=1, keepdims=True)) / norm[:, None]
    g_acc[bad] = 0.0
    g_fc = g_acc[triangles[:, 0]] + g_acc[triangles[:, 1]] + g_acc[triangles[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    # fc = e1 x e2  ->  g_e1 = e2 x g, g_e2 = g x e1
    g_e1 = np.cross(e2, g_fc)
    g_e2 = np.cross(g_fc, e1)
    vals = np.stack([-(g_e1 + g_e2), g_e1, g_e2], axis=1).reshape(-1, 3)
    return scatter_add(np.asarray(triangles).ravel(), vals, len(V))


def edge_graph(V, triangles):
    """Symmetric sparse matrix of mesh edge lengths."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    w = np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1)
    n = len(V)
    A = sp.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
    return (A + A.T).tocsr()


def geodesic_distances(V, triangles, sources):
    """Edge-path (Dijkstra) distances from each source vertex, shape (len(sources), N)."""
    return dijkstra(edge_graph(V, triangles), directed=False, indices=np.asarray(sources))


def farthest_point_sampling(V, triangles, count, seeds=()):
    """Greedy geodesic farthest-point sampling, starting from ``seeds`` (or vertex 0)."""
    A = edge_graph(V, triangles)
    chosen = [int(s) for s in seeds] or [0]
    d = dijkstra(A, directed=False, indices=chosen).min(axis=0)
    while len(chosen) < count:
        far = int(np.argmax(np.where(np.isfinite(d), d, -1.0)))
        if d[far] <= 0:
            raise ValueError(f"cannot place {count} distinct nodes on a mesh of {len(V)} vertices")
        chosen.append(far)
        d = np.minimum(d, dijkstra(A, directed=False, indices=far))
    return np.array(chosen[:count], dtype=np.int64)


def points_in_polygon(points, polygon):
    """Even-odd ray casting; ``points`` (P,2), ``polygon`` (K,2) closed implicitly."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    px, py = polygon[:, 0][None, :], polygon[:, 1][None, :]
    qx, qy = np.roll(px, -1, axis=1), np.roll(py, -1, axis=1)
    crosses = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = px + (y - py) * (qx - px) / (qy - py)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1
