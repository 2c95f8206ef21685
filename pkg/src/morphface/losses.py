"""Loss terms of the training objective.

Each function returns ``(value, gradient(s))`` with respect to its direct
inputs; :mod:`morphface.objective` chains them back to the parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dt
from .raster import CONTOUR_KEYS, lip_boundary_masks

LIP_CLASS = {"upper": 1, "lower": 2}


@dataclass
class LossWeights:
    seg: float = 0.1
    pho: float = 1.0
    per: float = 0.05
    smo: float = 10.0
    dis: float = 1.0
    tau: float = 10.0          # outlier gate for the segmentation term, pixels
    land: float = 1.0          # landmark term on the reconstruction (1 in the objective)
    land_mean: float = 0.0     # landmark term on the mean mesh under the frame pose

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def to_dict(self):
        return asdict(self)


# Boundary pixels stand for the lip edge half a pixel outward from their centre:
# top-boundary contours sit on the pixel's upper edge, bottom ones on its lower edge.
EDGE_SHIFT = {("upper", "outer"): 0.5, ("lower", "inner"): 0.5,
              ("upper", "inner"): -0.5, ("lower", "outer"): -0.5}


@dataclass
class DistanceTransformEntry:
    """Distance image and contour pixels for one (lip, side) of an observation.

    ``shift`` is added to the y coordinate of query points before comparing
    them with pixel centres, which places the contour on the pixel edge.
    """
    D: np.ndarray | None          # (H, W) exact EDT, None if no contour
    contour: np.ndarray           # (J, 2) pixel-centre coordinates
    shift: float = 0.0

    @property
    def empty(self):
        return self.D is None


def distance_transform(labels, lip, side):
    """Exact EDT of the ``side`` ('outer'/'inner') boundary of ``lip`` in a label image."""
    mask = lip_boundary_masks(labels)[(lip, side)]
    rows, cols = np.nonzero(mask)
    pts = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
    return DistanceTransformEntry(D=dt.distance_transform(mask), contour=pts, shift=EDGE_SHIFT[(lip, side)])


def distance_transform_set(labels):
    return {key: distance_transform(labels, *key) for key in CONTOUR_KEYS}


# ---------------------------------------------------------------------------

def landmark_loss(proj, targets, valid):
    """sum ||l_k - p_k||^2 over valid landmarks; returns (value, dL/dproj)."""
    diff = np.where(valid[:, None], proj - targets, 0.0)
    return float(np.sum(diff ** 2)), 2.0 * diff


def segmentation_pair_loss(points, entry, tau):
    """Contour loss for one (lip, side): DT sampled at mesh points plus the symmetric term.

    term1 sums D at every mesh-contour point whose D <= tau.  term2 sums, over
    image-contour pixels, the squared distance to the closest mesh-contour
    point when that distance is <= tau; the assignment is held fixed for the
    gradient.  Returns (value, dL/dpoints, diagnostics).
    """
    K = len(points)
    g = np.zeros((K, 2))
    if K == 0 or entry.empty:
        return 0.0, g, {"skipped": True}
    points = points + np.array([0.0, entry.shift])
    val, grad = dt.sample(entry.D, points)
    keep = val <= tau
    term1 = float(val[keep].sum())
    g[keep] += grad[keep]
    Q = entry.contour
    diff = points[None, :, :] - Q[:, None, :]            # (J, K, 2)
    d2 = np.einsum("jkc,jkc->jk", diff, diff)
    nearest = np.argmin(d2, axis=1)
    best = d2[np.arange(len(Q)), nearest]
    ok = best <= tau * tau
    term2 = float(best[ok].sum())
    np.add.at(g, nearest[ok], 2.0 * diff[np.arange(len(Q))[ok], nearest[ok]])
    return term1 + term2, g, {"skipped": False, "term1": term1, "term2": term2,
                              "gated_mesh": int((~keep).sum()), "gated_image": int((~ok).sum())}


def photometric_loss(F, S, mask):
    """sum over covered pixels of the squared colour difference; returns (value, dL/dS)."""
    diff = np.where(mask[:, :, None], S - F, 0.0)
    return float(np.sum(diff ** 2)), 2.0 * diff


def cosine_distance(a, b):
    """(1 - cos(a, b), d/da); None when either vector has zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    c = float(a @ b) / (na * nb)
    grad = -(b / (na * nb) - c * a / (na * na))
    return max(0.0, 1.0 - c), grad


def perceptual_loss(F, S, extractor, target_features=None):
    """Sum over extractor levels of one minus cosine similarity; returns (value, dL/dS, skipped)."""
    fS = extractor(S)
    fF = extractor(F) if target_features is None else target_features
    total = 0.0
    grads = []
    skipped = []
    for lvl, (a, b) in enumerate(zip(fS, fF)):
        res = cosine_distance(a, b)
        if res is None:
            skipped.append(lvl)
            grads.append(np.zeros_like(a))
            continue
        total += res[0]
        grads.append(res[1])
    return total, extractor.backward(S, grads), skipped


def smoothness_loss(d, laplacian):
    """sum_g sum_{n in N(g)} ||d_g - d_n||^2 with symmetric neighbourhoods.

    Each undirected edge is visited from both ends, so the value is
    2 tr(d^T L d) and the gradient 4 L d.
    """
    Ld = laplacian @ d
    return float(2.0 * np.sum(d * Ld)), 4.0 * Ld


def disentanglement_loss(delta, neutral):
    """sum ||delta_i||^2 over neutral frames; ``delta`` (F, m_e), ``neutral`` (F,) bool."""
    delta = np.atleast_2d(delta)
    gate = np.asarray(neutral, dtype=float).reshape(-1, 1)
    return float(np.sum(gate * delta ** 2)), 2.0 * gate * delta


@dataclass
class LossReport:
    value: float
    terms: dict                          # unweighted term values
    grads: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"value": self.value, "terms": dict(self.terms), "diagnostics": self.diagnostics}


class NumericalError(RuntimeError):
    pass


TERM_WEIGHT = {"land": "land", "land_mean": "land_mean", "seg": "seg", "pho": "pho",
               "per": "per", "smo": "smo", "dis": "dis"}


def total_loss(terms, weights):
    """Weighted sum of unweighted term values; raises on any non-finite term."""
    total = 0.0
    for name, val in terms.items():
        if not np.isfinite(val):
            raise NumericalError(f"loss term {name!r} is not finite")
        total += getattr(weights, TERM_WEIGHT[name]) * val
    return total
