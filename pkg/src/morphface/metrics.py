"""Evaluation metrics: geometric error, lip IoU, neutral expression energy, subspace angles."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import orthogonal_procrustes, subspace_angles as _scipy_angles

REPORT_VERSION = 1


class MetricError(ValueError):
    pass


def procrustes_align(V, V_ref, scale=True):
    """Rigid (optionally + isotropic scale) alignment of V onto V_ref."""
    V = np.asarray(V, dtype=float)
    V_ref = np.asarray(V_ref, dtype=float)
    mu, mu_ref = V.mean(0), V_ref.mean(0)
    A, B = V - mu, V_ref - mu_ref
    if np.linalg.norm(A) < 1e-12 or np.linalg.matrix_rank(A, tol=1e-9) < 2:
        raise MetricError("degenerate point set")
    R, sv = orthogonal_procrustes(A, B)
    s = sv / np.sum(A * A) if scale else 1.0
    return s * A @ R + mu_ref


def vertex_rmse(V, V_ref, alignment="similarity"):
    """Per-vertex RMSE in model units after ``alignment`` in {"similarity", "rigid", "none"}."""
    V = np.asarray(V, dtype=float)
    V_ref = np.asarray(V_ref, dtype=float)
    if V.shape != V_ref.shape:
        raise MetricError("meshes must share topology")
    if alignment == "similarity":
        V = procrustes_align(V, V_ref, scale=True)
    elif alignment == "rigid":
        V = procrustes_align(V, V_ref, scale=False)
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    return float(np.sqrt(np.mean(np.sum((V - V_ref) ** 2, axis=1))))


def lip_iou(pred_labels, true_labels):
    """IoU per lip ({"upper", "lower"}); a lip absent from both masks maps to None."""
    out = {}
    for lip, lab in (("upper", 1), ("lower", 2)):
        a = np.asarray(pred_labels) == lab
        b = np.asarray(true_labels) == lab
        union = np.logical_or(a, b).sum()
        out[lip] = None if union == 0 else float(np.logical_and(a, b).sum() / union)
    return out


def expression_energy(graph, M_gexp, delta):
    """||U M_exp delta||^2 / N for one frame (units of model length squared)."""
    d = graph.upsample(M_gexp @ np.asarray(delta, dtype=float))
    return float(np.sum(d ** 2) / len(d))


def neutral_expression_energy(graph, M_gexp, deltas):
    """Mean per-vertex expression energy over a set of neutral frames."""
    deltas = [np.asarray(d) for d in deltas]
    if not deltas:
        raise MetricError("empty neutral set")
    return float(np.mean([expression_energy(graph, M_gexp, d) for d in deltas]))


def subspace_angles(A, B):
    """Principal angles in degrees (ascending) between the column spans of A and B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    for M in (A, B):
        if np.linalg.matrix_rank(M) < M.shape[1]:
            raise MetricError("basis is rank deficient")
    return np.sort(np.degrees(_scipy_angles(A, B)))


def remove_modes(B, S):
    """Component of B's columns orthogonal to the span of S."""
    Q, _ = np.linalg.qr(S)
    return B - Q @ (Q.T @ B)


def similarity_modes(points):
    """(3P, 7) translations, infinitesimal rotations and scale of points (P, 3), point-major."""
    p = points - points.mean(axis=0)
    modes = []
    for k in range(3):
        t = np.zeros_like(p)
        t[:, k] = 1.0
        modes.append(t.ravel())
    for k in range(3):
        w = np.zeros(3)
        w[k] = 1.0
        modes.append(np.cross(w, p).ravel())
    modes.append(p.ravel())
    return np.column_stack(modes)


def basis_angles(graph, template, learned, truth):
    """Principal angles between mesh-space bases with graph similarity motions removed from both.

    Those motions are interchangeable with the per-frame pose, so they are
    not part of what a basis can be judged on.
    """
    S = graph.upsample_basis(similarity_modes(template.positions[graph.node_ids]))
    A = remove_modes(graph.upsample_basis(learned), S)
    B = remove_modes(graph.upsample_basis(truth), S)
    return subspace_angles(A, B)


def digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _stats(values):
    v = [x for x in values if x is not None]
    if not v:
        return None
    return {"mean": float(np.mean(v)), "sd": float(np.std(v)), "n": len(v)}


@dataclass
class EvalReport:
    items: list = field(default_factory=list)       # one dict per evaluated frame
    angles: dict = field(default_factory=dict)      # name -> list of degrees
    provenance: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def aggregate(self):
        def col(k):
            return [it.get(k) for it in self.items]
        agg = {k: _stats(col(k)) for k in ("rmse_similarity", "rmse_rigid", "iou_upper", "iou_lower",
                                            "expression_energy", "photometric_rmse")}
        neutral = [it["expression_energy"] for it in self.items if it.get("neutral")]
        agg["neutral_energy"] = float(np.mean(neutral)) if neutral else None
        for name, a in self.angles.items():
            agg[f"max_angle_{name}"] = float(np.max(a)) if len(a) else None
        return agg

    def check(self):
        for it in self.items:
            for k, v in it.items():
                if isinstance(v, float) and not np.isfinite(v):
                    raise MetricError(f"non-finite {k} in report")
        return self

    def to_dict(self):
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d

    def table(self):
        lines = []
        for k, v in self.aggregate().items():
            if v is None:
                lines.append(f"{k:<22} skipped")
            elif isinstance(v, dict):
                lines.append(f"{k:<22} {v['mean']:.6g} +- {v['sd']:.3g} (n={v['n']})")
            else:
                lines.append(f"{k:<22} {v:.6g}")
        return "\n".join(lines)
