"""Linear morphable model: deformation graph, assembly and identity orthogonalization.

Geometry models live on the embedded deformation graph.  A graph-level vector
of length 3G is stored node-major (x0, y0, z0, x1, ...), so reshaping it to
(G, 3) gives per-node displacements and the upsampling operator acts as
``weights @ d`` with ``weights`` the (N, G) skinning matrix.  The full
3N x 3G operator U is ``kron(weights, I3)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import geodesic_distances


class DimensionError(ValueError):
    pass


class GraphConstructionError(ValueError):
    pass


@dataclass
class DeformationGraph:
    node_ids: np.ndarray        # (G,) template vertex ids
    weights: sp.csr_matrix      # (N, G) skinning weights, rows sum to 1
    adjacency: sp.csr_matrix    # (G, G) symmetric 0/1 neighbourhood for smoothness

    @property
    def node_count(self):
        return len(self.node_ids)

    @property
    def vertex_count(self):
        return self.weights.shape[0]

    @property
    def U(self):
        return sp.kron(self.weights, sp.identity(3), format="csr")

    @property
    def laplacian(self):
        deg = np.asarray(self.adjacency.sum(axis=1)).ravel()
        return sp.diags(deg) - self.adjacency

    def upsample(self, d):
        """Graph displacements (G, 3) or (3G,) -> vertex displacements (N, 3)."""
        return self.weights @ np.asarray(d).reshape(self.node_count, 3)

    def upsample_basis(self, M):
        """(3G, m) graph basis -> (3N, m) mesh basis."""
        m = M.shape[1]
        out = self.weights @ M.reshape(self.node_count, 3 * m)
        return np.asarray(out).reshape(3 * self.vertex_count, m)

    def pullback(self, gV):
        """Adjoint of :meth:`upsample`: (N, 3) vertex gradient -> (G, 3) node gradient."""
        return np.asarray(self.weights.T @ gV)


def build_upsampling(template, k=4, radius=None, neighbors=6, metric="geodesic"):
    """k-nearest-node inverse-distance skinning from graph nodes to every vertex.

    Distances are measured along mesh edges (``metric="geodesic"``) so vertices
    on either side of the mouth slit bind to nodes on their own lip.  A vertex
    that coincides with a node copies it exactly.  ``neighbors`` sets the k of
    the node adjacency used by the smoothness term.
    """
    if k < 1:
        raise GraphConstructionError("k must be >= 1")
    nodes = np.asarray(template.graph_node_ids)
    if len(nodes) == 0:
        raise GraphConstructionError("graph has no nodes")
    V = template.positions
    if metric == "geodesic":
        D = geodesic_distances(V, template.triangles, nodes)
    elif metric == "euclidean":
        D = np.linalg.norm(V[None, :, :] - V[nodes][:, None, :], axis=2)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    G, N = D.shape
    kk = min(k, G)
    order = np.argsort(D, axis=0, kind="stable")[:kk]          # (kk, N)
    dist = np.take_along_axis(D, order, axis=0)
    rows, cols, vals = [], [], []
    for v in range(N):
        d = dist[:, v]
        g = order[:, v]
        ok = np.isfinite(d)
        if radius is not None:
            ok &= d <= radius
        if not ok.any():
            raise GraphConstructionError(f"vertex {v} has no graph node within the influence radius")
        d, g = d[ok], g[ok]
        if d[0] == 0.0:
            w = np.zeros_like(d)
            w[d == 0.0] = 1.0
        else:
            w = 1.0 / d
        w = w / w.sum()
        rows += [v] * len(g)
        cols += list(g)
        vals += list(w)
    W = sp.csr_matrix((vals, (rows, cols)), shape=(N, G))
    adj = _node_adjacency(D[:, nodes], neighbors)
    return DeformationGraph(node_ids=nodes, weights=W, adjacency=adj)


def _node_adjacency(Dnn, k):
    G = Dnn.shape[0]
    k = min(k, G - 1)
    A = np.zeros((G, G))
    if k > 0:
        order = np.argsort(Dnn, axis=1, kind="stable")
        for g in range(G):
            nb = [n for n in order[g] if n != g][:k]
            A[g, nb] = 1.0
    A = np.maximum(A, A.T)
    return sp.csr_matrix(A)


@dataclass
class MorphableModel:
    M_gid: np.ndarray    # (3G, m_i)
    M_gexp: np.ndarray   # (3G, m_e)
    M_R: np.ndarray      # (3N, m_r)

    @property
    def dims(self):
        return self.M_gid.shape[1], self.M_gexp.shape[1], self.M_R.shape[1]

    @property
    def node_count(self):
        return self.M_gid.shape[0] // 3

    @property
    def vertex_count(self):
        return self.M_R.shape[0] // 3

    def copy(self):
        return MorphableModel(self.M_gid.copy(), self.M_gexp.copy(), self.M_R.copy())

    def check(self, template=None, graph=None):
        G = self.node_count
        if self.M_gexp.shape[0] != 3 * G or self.M_gid.shape[0] != 3 * G:
            raise DimensionError("geometry bases must share 3G rows")
        if template is not None and self.M_R.shape[0] != 3 * template.vertex_count:
            raise DimensionError("reflectance basis must have 3N rows")
        if graph is not None and graph.node_count != G:
            raise DimensionError("model and graph disagree on node count")
        for name in ("M_gid", "M_gexp", "M_R"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DimensionError(f"{name} has non-finite entries")
        return self

    def arrays(self):
        return {"M_gid": self.M_gid, "M_gexp": self.M_gexp, "M_R": self.M_R}

    def digest(self):
        h = hashlib.sha256()
        for a in (self.M_gid, self.M_gexp, self.M_R):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(template, graph, dims, seed=0, scale=1e-3):
    """Small i.i.d. Gaussian bases so early renders stay close to the template."""
    m_i, m_e, m_r = dims
    rng = np.random.default_rng(seed)
    s = scale * template.bbox_diagonal()
    G, N = graph.node_count, template.vertex_count
    return MorphableModel(M_gid=rng.normal(0, s, (3 * G, m_i)),
                          M_gexp=rng.normal(0, s, (3 * G, m_e)),
                          M_R=rng.normal(0, scale, (3 * N, m_r)))


def _vec(x, n, name):
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (n,):
        raise DimensionError(f"{name} must have length {n}, got {x.shape[0]}")
    return x


def node_deformation(model, alpha, delta):
    """Per-node displacement (G, 3) = M_gid alpha + M_gexp delta."""
    m_i, m_e, _ = model.dims
    d = model.M_gid @ _vec(alpha, m_i, "alpha") + model.M_gexp @ _vec(delta, m_e, "delta")
    return d.reshape(-1, 3)


def assemble_geometry(template, graph, model, alpha, delta):
    """Vertex positions (N, 3) = mean + U (M_gid alpha + M_gexp delta)."""
    if graph.vertex_count != template.vertex_count or graph.node_count != model.node_count:
        raise DimensionError("template, graph and model sizes disagree")
    return template.positions + graph.upsample(node_deformation(model, alpha, delta))


def assemble_reflectance(template, model, beta):
    """Per-vertex reflectance (N, 3) = mean + M_R beta; not clamped."""
    if model.vertex_count != template.vertex_count:
        raise DimensionError("reflectance basis does not match the template")
    b = _vec(beta, model.dims[2], "beta")
    return template.reflectance + (model.M_R @ b).reshape(-1, 3)


def orthogonalize_identity(model, graph, cond_limit=1e12):
    """Project the identity basis off the expression basis in full-mesh space.

    With A = U M_gexp and B = U M_gid the mesh-level result is
    B - A (A^T A)^-1 A^T B.  Because that lies in the range of U it pulls back
    exactly to M_gid - M_gexp K with K = (A^T A)^-1 A^T B.
    """
    out = model.copy()
    if model.M_gexp.shape[1] == 0 or not np.any(model.M_gexp):
        return out
    A = graph.upsample_basis(model.M_gexp)
    B = graph.upsample_basis(model.M_gid)
    AtA = A.T @ A
    AtB = A.T @ B
    if np.linalg.cond(AtA) > cond_limit:
        warnings.warn("expression basis is rank deficient; using a regularized projection",
                      RuntimeWarning, stacklevel=2)
        K = np.linalg.lstsq(A, B, rcond=1e-10)[0]
    else:
        K = np.linalg.solve(AtA, AtB)
    out.M_gid = model.M_gid - model.M_gexp @ K
    return out


def orthogonality_residual(model, graph):
    """(max |A^T B|, spectral scale ||A|| ||B||) for A = U M_gexp, B = U M_gid."""
    A = graph.upsample_basis(model.M_gexp)
    B = graph.upsample_basis(model.M_gid)
    if A.size == 0 or B.size == 0:
        return 0.0, 1.0
    scale = np.linalg.norm(A, 2) * np.linalg.norm(B, 2)
    return float(np.abs(A.T @ B).max()), float(scale if scale > 0 else 1.0)


# ---------------------------------------------------------------------------
# model file: b"MFMM" | u32 version | u32 header bytes | header JSON | f8 arrays

_MAGIC = b"MFMM"
_VERSION = 1


def model_to_bytes(model):
    G, N = model.node_count, model.vertex_count
    m_i, m_e, m_r = model.dims
    header = json.dumps({"N": N, "G": G, "m_i": m_i, "m_e": m_e, "m_r": m_r,
                         "dtype": "<f8", "order": ["M_gid", "M_gexp", "M_R"]}).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    for a in (model.M_gid, model.M_gexp, model.M_R):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data):
    if data[:4] != _MAGIC:
        raise ValueError("not a morphable model file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise ValueError(f"unsupported model file version {version}")
    h = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    arrays = []
    for rows, cols in ((3 * h["G"], h["m_i"]), (3 * h["G"], h["m_e"]), (3 * h["N"], h["m_r"])):
        n = rows * cols
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(rows, cols).copy())
        off += 8 * n
    return MorphableModel(*arrays)


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_model(model, path):
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
