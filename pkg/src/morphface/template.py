"""The face template: fixed topology, mean geometry/reflectance and semantic labels.

Coordinates follow the camera convention used throughout the package: x to the
right, y down, z away from the viewer, millimetres.  A frontal face therefore
has its nose pointing towards -z.

The bundled template is procedural: a height field over an elliptical grid
with a nose, brow ridge, eye sockets, chin and a mouth slit.  The slit is made
of duplicated vertices so the two lips can separate under deformation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import farthest_point_sampling, points_in_polygon

LIP_RING_NAMES = ("upper_outer", "upper_inner", "lower_outer", "lower_inner")
LIP_LABELS = {"upper": 1, "lower": 2}
N_LANDMARKS = 66
N_CONTOUR_LANDMARKS = 17


class TemplateError(ValueError):
    pass


@dataclass
class FaceTemplate:
    positions: np.ndarray            # (N, 3) mean geometry
    reflectance: np.ndarray          # (N, 3) mean albedo in [0, 1]
    triangles: np.ndarray            # (T, 3) int
    landmark_ids: np.ndarray         # (66,) frontal landmark vertices
    lip_rings: dict                  # name -> ordered vertex ids, corner to corner
    graph_node_ids: np.ndarray       # (G,)
    contour_candidates: list = field(default_factory=list)  # per jaw landmark

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.reflectance = np.asarray(self.reflectance, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64)
        self.graph_node_ids = np.asarray(self.graph_node_ids, dtype=np.int64)
        self.lip_rings = {k: np.asarray(v, dtype=np.int64) for k, v in self.lip_rings.items()}
        self.contour_candidates = [np.asarray(c, dtype=np.int64) for c in self.contour_candidates]
        self._tri_labels = None

    @property
    def vertex_count(self):
        return len(self.positions)

    @property
    def node_count(self):
        return len(self.graph_node_ids)

    def validate(self):
        n = self.vertex_count
        if self.positions.shape != (n, 3) or self.reflectance.shape != (n, 3):
            raise TemplateError("positions/reflectance must be (N, 3)")
        if self.triangles.min() < 0 or self.triangles.max() >= n:
            raise TemplateError("triangle index out of range")
        for name, ids in (("landmark_ids", self.landmark_ids), ("graph_node_ids", self.graph_node_ids)):
            if len(np.unique(ids)) != len(ids):
                raise TemplateError(f"{name} must be distinct")
            if ids.min() < 0 or ids.max() >= n:
                raise TemplateError(f"{name} out of range")
        if set(self.lip_rings) != set(LIP_RING_NAMES):
            raise TemplateError(f"lip rings must be exactly {LIP_RING_NAMES}")
        for lip in ("upper", "lower"):
            outer = self.lip_rings[f"{lip}_outer"]
            inner = self.lip_rings[f"{lip}_inner"]
            if outer[0] != inner[0] or outer[-1] != inner[-1]:
                raise TemplateError(f"{lip} lip rings must share both mouth corners")
            loop = np.concatenate([outer, inner[::-1][1:-1]])
            if len(np.unique(loop)) != len(loop):
                raise TemplateError(f"{lip} lip loop revisits a vertex")
            self._check_loop_edges(loop, lip)
        return self

    def _check_loop_edges(self, loop, lip):
        edges = set()
        for t in self.triangles:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                edges.add((min(a, b), max(a, b)))
        for a, b in zip(loop, np.roll(loop, -1)):
            if (min(a, b), max(a, b)) not in edges:
                raise TemplateError(f"{lip} lip loop step {a}->{b} is not a mesh edge")

    def lip_loop_polygon(self, lip):
        outer = self.lip_rings[f"{lip}_outer"]
        inner = self.lip_rings[f"{lip}_inner"]
        loop = np.concatenate([outer, inner[::-1][1:-1]])
        return self.positions[loop, :2]

    @property
    def triangle_lip_labels(self):
        """Per-triangle label: 0 none, 1 upper lip, 2 lower lip (from the ring loops)."""
        if self._tri_labels is None:
            cent = self.positions[self.triangles, :2].mean(axis=1)
            labels = np.zeros(len(self.triangles), dtype=np.int64)
            for lip, lab in LIP_LABELS.items():
                labels[points_in_polygon(cent, self.lip_loop_polygon(lip))] = lab
            self._tri_labels = labels
        return self._tri_labels

    @property
    def contour_landmark_slots(self):
        return np.arange(len(self.contour_candidates))

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))


def dynamic_landmark_ids(template, proj):
    """Landmark vertex ids for one frame given all projected vertices ``proj`` (N, 2).

    Each jaw landmark picks, among its candidate vertices, the one whose
    projection lies furthest along the outward image direction (measured from
    the centroid of the projected nose landmarks).  All other landmarks are fixed.
    """
    ids = template.landmark_ids.copy()
    if not template.contour_candidates:
        return ids
    center = proj[template.landmark_ids[27:36]].mean(axis=0)
    for k, cand in enumerate(template.contour_candidates):
        ref = proj[cand].mean(axis=0) - center
        nrm = np.linalg.norm(ref)
        if nrm == 0:
            continue
        scores = (proj[cand] - center) @ (ref / nrm)
        ids[k] = cand[int(np.argmax(scores))]
    return ids


# ---------------------------------------------------------------------------
# procedural template

def _height(x, y):
    a, b = 75.0 * 1.18, 85.0 * 1.18
    base = -55.0 * np.sqrt(np.clip(1.0 - (x / a) ** 2 - (y / b) ** 2, 0.0, None))
    nose = -24.0 * np.exp(-(x / 10.0) ** 2 - ((y - 2.0) / 20.0) ** 2)
    brow = -5.0 * np.exp(-((np.abs(x) - 28.0) / 18.0) ** 2 - ((y + 35.0) / 6.0) ** 2)
    eyes = 7.0 * np.exp(-((np.abs(x) - 30.0) / 12.0) ** 2 - ((y + 20.0) / 7.0) ** 2)
    lips = -6.0 * np.exp(-(x / 26.0) ** 2 - ((y - 40.0) / 10.0) ** 2)
    chin = -6.0 * np.exp(-(x / 20.0) ** 2 - ((y - 68.0) / 9.0) ** 2)
    return base + nose + brow + eyes + lips + chin


def _albedo(x, y, lip_vertex):
    skin = np.array([0.78, 0.58, 0.47])
    c = np.tile(skin, (len(x), 1))
    blotch = 0.05 * np.sin(x / 9.0) * np.cos(y / 11.0)
    c += blotch[:, None] * np.array([1.0, 0.6, 0.5])
    cheeks = np.exp(-((np.abs(x) - 38.0) / 14.0) ** 2 - ((y - 12.0) / 14.0) ** 2)
    c += 0.08 * cheeks[:, None] * np.array([1.0, -0.4, -0.3])
    brows = np.exp(-((np.abs(x) - 28.0) / 14.0) ** 2 - ((y + 35.0) / 3.5) ** 2)
    c = c * (1.0 - 0.6 * brows[:, None])
    eyes = np.exp(-((np.abs(x) - 30.0) / 7.0) ** 2 - ((y + 20.0) / 3.5) ** 2)
    c = c * (1.0 - 0.5 * eyes[:, None])
    c[lip_vertex] = np.array([0.70, 0.30, 0.32])
    return np.clip(c, 0.02, 0.98)


def make_template(spacing=3.1, graph_nodes=80, half_width=75.0, half_height=85.0,
                  mouth_y=40.0, mouth_half_width=30.0, upper_lip=12.0, lower_lip=14.0):
    """Build the bundled procedural face template.

    ``spacing`` is the grid step in mm; the default gives about 2,500 vertices.
    """
    h = float(spacing)
    ni = int(np.ceil(half_width / h))
    nj = int(np.ceil(half_height / h))
    jm = int(round(mouth_y / h))
    iL = -int(round(mouth_half_width / h))
    iR = -iL
    if iR - iL < 2:
        raise TemplateError("grid too coarse for a mouth slit")
    w = -iL * h
    ym = jm * h

    inside = {}
    for j in range(-nj, nj + 1):
        for i in range(-ni, ni + 1):
            x, y = i * h, j * h
            if (x / half_width) ** 2 + (y / half_height) ** 2 <= 1.0:
                inside[(i, j)] = True

    keys = []
    index = {}

    def vid(i, j, lower=False):
        dup = j == jm and iL < i < iR
        key = (i, j, 1 if (lower and dup) else 0)
        if key not in index:
            index[key] = len(keys)
            keys.append(key)
        return index[key]

    tris, tri_lip = [], []
    for j in range(-nj, nj):
        for i in range(-ni, ni):
            if not all(((i + di, j + dj) in inside) for di in (0, 1) for dj in (0, 1)):
                continue
            lower = j == jm  # cells directly below the slit use the lower copies
            p00 = vid(i, j, lower)
            p10 = vid(i + 1, j, lower)
            p01 = vid(i, j + 1)
            p11 = vid(i + 1, j + 1)
            lab = 0
            if iL <= i < iR:
                xc = (i + 0.5) * h
                s = np.sqrt(max(0.0, 1.0 - (xc / w) ** 2))
                n_up = max(1, int(round(upper_lip * s / h)))
                n_lo = max(1, int(round(lower_lip * s / h)))
                if jm - n_up <= j < jm:
                    lab = 1
                elif jm <= j < jm + n_lo:
                    lab = 2
            tris += [(p00, p01, p10), (p10, p01, p11)]
            tri_lip += [lab, lab]

    tris = np.array(tris, dtype=np.int64)
    tri_lip = np.array(tri_lip)
    ij = np.array([(k[0], k[1]) for k in keys], dtype=float)
    xy = ij * h
    z = _height(xy[:, 0], xy[:, 1])
    V = np.column_stack([xy, z])

    rings = {}
    for lip, lab in LIP_LABELS.items():
        outer, inner = _trace_lip(tris[tri_lip == lab], keys, jm, (vid(iL, jm), vid(iR, jm)))
        rings[f"{lip}_outer"] = outer
        rings[f"{lip}_inner"] = inner
    lip_vertex = np.unique(tris[tri_lip > 0])
    R = _albedo(xy[:, 0], xy[:, 1], lip_vertex)

    center = 0.5 * (V.max(0) + V.min(0))
    V = V - center
    feat_shift = center[:2]

    def feat(x, y):
        return np.array([x, y]) - feat_shift

    used = set()

    def nearest(pt, pool=None):
        pool = np.arange(len(V)) if pool is None else np.asarray(pool)
        d = np.linalg.norm(V[pool, :2] - pt, axis=1)
        for k in np.argsort(d, kind="stable"):
            cand = int(pool[k])
            if cand not in used:
                used.add(cand)
                return cand
        raise TemplateError("ran out of vertices for landmarks")

    non_lower = np.array([index[k] for k in keys if k[2] == 0])
    lm = []
    cand_lists = []
    cx, cy = 0.0, 5.0
    for k in range(N_CONTOUR_LANDMARKS):
        phi = np.deg2rad(185.0 - k * 190.0 / 16.0)
        tgt = np.array([0.95 * half_width * np.cos(phi), 0.95 * half_height * np.sin(phi)])
        cands = []
        for f in np.linspace(0.6, 1.0, 9):
            pt = feat(cx + f * (tgt[0] - cx), cy + f * (tgt[1] - cy))
            c = int(non_lower[np.argmin(np.linalg.norm(V[non_lower, :2] - pt, axis=1))])
            if c not in cands:
                cands.append(c)
        cand_lists.append(cands)
        lm.append(nearest(feat(*tgt), non_lower))
        if lm[-1] not in cands:
            cands.append(lm[-1])
    for side in (-1, 1):
        for t in np.linspace(-1, 1, 5):
            lm.append(nearest(feat(side * (28.0 + 13.0 * t), -36.0 - 3.0 * (1 - t * t)), non_lower))
    for y in (-22.0, -14.0, -6.0, 2.0):
        lm.append(nearest(feat(0.0, y), non_lower))
    for x in (-11.0, -5.5, 0.0, 5.5, 11.0):
        lm.append(nearest(feat(x, 14.0 - 2.0 * (1 - abs(x) / 11.0)), non_lower))
    for side in (-1, 1):
        for ang in np.deg2rad([180, 120, 60, 0, -60, -120]):
            lm.append(nearest(feat(side * 30.0 + 9.0 * np.cos(ang), -20.0 - 3.5 * np.sin(ang)), non_lower))
    uo, ui = rings["upper_outer"], rings["upper_inner"]
    lo, li = rings["lower_outer"], rings["lower_inner"]
    used.add(int(uo[0]))
    used.add(int(uo[-1]))
    mouth = [int(uo[0])]
    for x in np.linspace(-2 * w / 3, 2 * w / 3, 5):
        mouth.append(nearest(feat(x, ym - upper_lip * np.sqrt(1 - (x / w) ** 2)), uo[1:-1]))
    mouth.append(int(uo[-1]))
    for x in np.linspace(2 * w / 3, -2 * w / 3, 5):
        mouth.append(nearest(feat(x, ym + lower_lip * np.sqrt(1 - (x / w) ** 2)), lo[1:-1]))
    for x in (-w / 3, 0.0, w / 3):
        mouth.append(nearest(feat(x, ym), ui[1:-1]))
    for x in (w / 3, 0.0, -w / 3):
        mouth.append(nearest(feat(x, ym), li[1:-1]))
    lm += mouth

    seeds = (int(ui[len(ui) // 2]), int(li[len(li) // 2]))
    nodes = farthest_point_sampling(V, tris, graph_nodes, seeds=seeds)
    tpl = FaceTemplate(positions=V, reflectance=R, triangles=tris, landmark_ids=np.array(lm),
                       lip_rings=rings, graph_node_ids=nodes, contour_candidates=cand_lists)
    return tpl.validate()


def _trace_lip(lip_tris, keys, jm, corners):
    """Split the boundary loop of a lip's triangle set into (outer, inner) paths."""
    count = {}
    for t in lip_tris:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            e = (min(a, b), max(a, b))
            count[e] = count.get(e, 0) + 1
    adj = {}
    for (a, b), c in count.items():
        if c == 1:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
    if any(len(v) != 2 for v in adj.values()):
        raise TemplateError("lip region boundary is not a simple loop")
    cL, cR = corners
    paths = []
    for start_next in adj[cL]:
        path = [cL, start_next]
        while path[-1] != cR:
            a, b = adj[path[-1]]
            path.append(a if a != path[-2] else b)
        paths.append(path)
    on_slit = [all(keys[v][1] == jm for v in p) for p in paths]
    if sorted(on_slit) != [False, True]:
        raise TemplateError("could not identify inner lip path")
    inner = paths[on_slit.index(True)]
    outer = paths[on_slit.index(False)]
    return np.array(outer), np.array(inner)


# ---------------------------------------------------------------------------
# OBJ + sidecar JSON

def save_template(template, path):
    path = Path(path)
    lines = [f"# face template: {template.vertex_count} vertices"]
    for p, c in zip(template.positions, template.reflectance):
        lines.append("v %.17g %.17g %.17g %.17g %.17g %.17g" % (*p, *c))
    for t in template.triangles + 1:
        lines.append("f %d %d %d" % tuple(t))
    path.write_text("\n".join(lines) + "\n")
    side = {
        "landmark_vertex_ids": template.landmark_ids.tolist(),
        "lip_rings": {k: v.tolist() for k, v in template.lip_rings.items()},
        "graph_node_ids": template.graph_node_ids.tolist(),
        "contour_candidates": [c.tolist() for c in template.contour_candidates],
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=1))


def load_template(path):
    path = Path(path)
    V, C, F = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            V.append(vals[:3])
            C.append(vals[3:6] if len(vals) >= 6 else [0.5, 0.5, 0.5])
        elif parts[0] == "f":
            F.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    side = json.loads(path.with_suffix(".json").read_text())
    return FaceTemplate(positions=np.array(V), reflectance=np.array(C), triangles=np.array(F),
                        landmark_ids=side["landmark_vertex_ids"], lip_rings=side["lip_rings"],
                        graph_node_ids=side["graph_node_ids"],
                        contour_candidates=side.get("contour_candidates", [])).validate()
