"""Synthetic ground-truth world and observation corpus.

The world is a morphable model with known bases.  Geometry columns are
graph-level Gaussian fields smoothed by the node Laplacian, with rigid and
scale motions projected out and orthonormalized in mesh space (B = U M,
B^T B = I).  Identity columns are projected off the expression span.  The
first expression column is a designed jaw-drop field, so a positive first
coefficient opens the mouth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import dt
from .mesh import edge_graph
from .metrics import similarity_modes
from .model import DimensionError, MorphableModel
from .objective import ClipParams, FrameObservation, Rig, default_lighting, forward_frame, safe_project
from .scene import REST_DISTANCE
from .template import dynamic_landmark_ids


@dataclass
class SamplingConfig:
    id_rms: float = 4.0           # mm, per-coordinate RMS of the identity deformation
    exp_rms: float = 2.0          # mm, non-jaw expression columns
    jaw_open: float = 6.0         # mm, typical lip separation of the jaw column
    ref_rms: float = 0.05         # reflectance units
    yaw: float = 25.0             # degrees, uniform +-
    pitch: float = 10.0
    roll: float = 5.0
    shift: float = 5.0            # mm, std of x/y translation
    depth: float = 20.0           # mm, uniform +- around the rest distance
    light: float = 0.08           # std of non-ambient lighting perturbations
    min_coverage: float = 0.1     # fraction of the frame the face must cover
    retries: int = 20

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruthWorld:
    rig: Rig
    model: MorphableModel
    id_std: np.ndarray
    exp_std: np.ndarray
    ref_std: np.ndarray
    config: SamplingConfig
    seed: int

    @property
    def dims(self):
        return self.model.dims


@dataclass
class Clip:
    params: ClipParams                      # generating parameters
    observations: list                      # FrameObservation with float images
    images_u8: list = field(default_factory=list)
    neutral: bool = False
    name: str = ""


def smoothed_field(rng, laplacian, n, smooth=2.0, passes=3):
    """Gaussian (n, 3) field low-passed by repeated (I + s L)^-1 solves."""
    A = (sp.identity(n) + smooth * laplacian).tocsc()
    solve = sp.linalg.factorized(A)
    x = rng.normal(size=(n, 3))
    for _ in range(passes):
        x = np.column_stack([solve(x[:, c]) for c in range(3)])
    return x


def _mesh_metric(graph):
    WtW = (graph.weights.T @ graph.weights).toarray()
    return np.kron(WtW, np.eye(3))


def _project_off(X, S, Wm):
    if S.shape[1] == 0:
        return X
    K = np.linalg.solve(S.T @ Wm @ S, S.T @ Wm @ X)
    return X - S @ K


def _orthonormalize(X, Wm):
    """Columns of X made orthonormal under <a, b> = a^T Wm b, keeping the column order."""
    L = np.linalg.cholesky(X.T @ Wm @ X)
    return np.linalg.solve(L, X.T).T


def jaw_field(template, graph):
    """Node displacement (G, 3) pulling the lower lip and chin down (+y)."""
    P = template.positions[graph.node_ids]
    lower = set(template.lip_rings["lower_outer"]) | set(template.lip_rings["lower_inner"])
    upper = set(template.lip_rings["upper_outer"]) | set(template.lip_rings["upper_inner"])
    ym = template.positions[template.lip_rings["upper_inner"], 1].mean()
    d = np.zeros_like(P)
    for g, v in enumerate(graph.node_ids):
        below = (v in lower) or (P[g, 1] > ym + 1e-6 and v not in upper)
        if below:
            d[g, 1] = np.exp(-(P[g, 0] / 45.0) ** 2) * np.exp(-np.clip(P[g, 1] - ym - 25.0, 0, None) / 40.0)
    return d


def make_gt_model(rig, dims, seed=0, config=None):
    """Known-basis world on ``rig``'s template and graph."""
    config = config or SamplingConfig()
    tpl, graph = rig.template, rig.graph
    m_i, m_e, m_r = dims
    G, N = graph.node_count, tpl.vertex_count
    if m_i + m_e + 7 > 3 * G:
        raise DimensionError(f"geometry dims {m_i}+{m_e} too large for {G} nodes")
    if m_r > 3 * N:
        raise DimensionError(f"reflectance dims {m_r} too large for {N} vertices")
    rng = np.random.default_rng(seed)
    Lg = graph.laplacian.tocsr()
    Wm = _mesh_metric(graph)
    S = similarity_modes(tpl.positions[graph.node_ids])

    cols = []
    if m_e > 0:
        cols.append(jaw_field(tpl, graph).ravel())
    while len(cols) < m_e:
        cols.append(smoothed_field(rng, Lg, G).ravel())
    E = np.column_stack(cols) if cols else np.zeros((3 * G, 0))
    E = _orthonormalize(_project_off(E, S, Wm), Wm) if m_e else E
    if m_e and E[:, 0].reshape(-1, 3)[:, 1].sum() < 0:
        E[:, 0] = -E[:, 0]

    I = np.column_stack([smoothed_field(rng, Lg, G).ravel() for _ in range(m_i)]) if m_i else np.zeros((3 * G, 0))
    if m_i:
        I = _project_off(I, np.column_stack([S, E]), Wm)
        I = _orthonormalize(I, Wm)

    Lv = _vertex_laplacian(tpl)
    Rf = np.column_stack([smoothed_field(rng, Lv, N, smooth=4.0).ravel() for _ in range(m_r)]) if m_r else np.zeros((3 * N, 0))
    if m_r:
        Rf = np.linalg.qr(Rf)[0]

    def stds(m, rms, n_rows):
        decay = 1.0 / (1.0 + 0.25 * np.arange(m))
        return rms * np.sqrt(n_rows) * decay / np.sqrt(np.sum(decay ** 2)) if m else np.zeros(0)

    id_std = stds(m_i, config.id_rms, 3 * N)
    exp_std = stds(m_e, config.exp_rms, 3 * N)
    if m_e:
        lower = tpl.lip_rings["lower_inner"][1:-1]
        gain = np.abs(graph.upsample(E[:, 0])[lower, 1]).mean()
        exp_std[0] = config.jaw_open / gain
    ref_std = stds(m_r, config.ref_rms, 3 * N)
    model = MorphableModel(I, E, Rf)
    return GroundTruthWorld(rig, model, id_std, exp_std, ref_std, config, seed)


def _vertex_laplacian(template):
    A = edge_graph(template.positions, template.triangles)
    A = (A > 0).astype(float)
    A = A.maximum(A.T)
    deg = np.asarray(A.sum(axis=1)).ravel()
    return sp.diags(deg) - A


def mesh_basis(graph, M):
    """Mesh-space basis U M (3N, m) of a graph-level basis."""
    return graph.upsample_basis(M)


# ---------------------------------------------------------------------------

def _sample_pose(rng, cfg):
    ang = np.deg2rad([rng.uniform(-cfg.pitch, cfg.pitch), rng.uniform(-cfg.yaw, cfg.yaw),
                      rng.uniform(-cfg.roll, cfg.roll)])
    t = np.array([rng.normal(0, cfg.shift), rng.normal(0, cfg.shift),
                  REST_DISTANCE + rng.uniform(-cfg.depth, cfg.depth)])
    return ang, t


def _sample_lighting(rng, cfg):
    g = default_lighting()
    g[:, 0] *= rng.uniform(0.85, 1.0)
    g[:, 1:] += rng.normal(0, cfg.light, 8)[None, :] / 0.4886025
    g *= 1.0 + rng.normal(0, 0.03, (3, 1))
    return g


def observe(rig, model, params, i, neutral=False):
    """Render frame ``i`` and package it as an observation with float image."""
    st = forward_frame(rig, model, params, i)
    proj, ok = safe_project(st.vcam, rig.camera)
    ids = dynamic_landmark_ids(rig.template, proj)
    lm = proj[ids]
    W, H = rig.camera.width, rig.camera.height
    valid = ok[ids] & (lm[:, 0] >= 0) & (lm[:, 0] < W) & (lm[:, 1] >= 0) & (lm[:, 1] < H)
    labels = st.out.label_image(rig.template.triangle_lip_labels)
    return FrameObservation(st.out.image(), lm, valid, labels, is_neutral=neutral), st.out


def to_u8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def sample_clip(world, n_frames, neutral=False, rng=None, name=""):
    """Draw shared identity/reflectance and per-frame expression, lighting and pose.

    Frames whose face coverage falls below the configured minimum are redrawn
    (bounded retries).
    """
    rng = np.random.default_rng(rng)
    cfg = world.config
    m_i, m_e, m_r = world.dims
    p = ClipParams.initial(world.dims, n_frames)
    p.alpha[:] = rng.normal(size=m_i) * world.id_std
    p.beta[:] = rng.normal(size=m_r) * world.ref_std
    if not neutral and m_e:
        p.delta[:] = rng.normal(size=(n_frames, m_e)) * world.exp_std
        p.delta[:, 0] = np.abs(p.delta[:, 0])
    obs, u8 = [], []
    min_px = cfg.min_coverage * world.rig.camera.width * world.rig.camera.height
    for i in range(n_frames):
        p.gamma[i] = _sample_lighting(rng, cfg)
        for _ in range(cfg.retries):
            p.rotation[i], p.translation[i] = _sample_pose(rng, cfg)
            o, out = observe(world.rig, world.model, p, i, neutral)
            if out.mask.sum() >= min_px:
                break
        else:
            raise RuntimeError("could not sample a frame with enough face coverage")
        obs.append(o)
        u8.append(to_u8(o.image))
    return Clip(p, obs, u8, neutral, name)


def sample_corpus(world, n_clips, n_neutral, n_frames=4, seed=0):
    """Multi-frame expressive clips followed by single-frame neutral images."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(n_clips + n_neutral)
    clips = [sample_clip(world, n_frames, False, np.random.default_rng(s), f"clip_{k:04d}")
             for k, s in enumerate(seeds[:n_clips])]
    clips += [sample_clip(world, 1, True, np.random.default_rng(s), f"neutral_{k:04d}")
              for k, s in enumerate(seeds[n_clips:])]
    return clips


def quantized(clip):
    """Copy of the clip's observations using the 8-bit images."""
    return [FrameObservation(u8 / 255.0, o.landmarks.copy(), o.landmark_valid.copy(),
                             o.lip_labels.copy(), o.is_neutral)
            for o, u8 in zip(clip.observations, clip.images_u8)]


# ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    landmark_sigma: float = 0.0    # px
    mask_morph: int = 0            # >0 dilates, <0 erodes the lip labels (iterations)
    blobs: int = 0                 # spurious lip-label disks per frame
    blob_radius: int = 2
    blob_min_distance: float = 50.0  # px from any true lip contour pixel
    image_sigma: float = 0.0
    seed: int = 0

    def is_zero(self):
        return (self.landmark_sigma == 0 and self.mask_morph == 0 and self.blobs == 0
                and self.image_sigma == 0)

    def to_dict(self):
        return asdict(self)


def _morph(labels, it):
    out = labels.copy()
    if it == 0:
        return out
    for lab in (1, 2):
        m = labels == lab
        if it > 0:
            grown = ndimage.binary_dilation(m, iterations=it) & (out == 0)
            out[grown] = lab
        else:
            out[m & ~ndimage.binary_erosion(m, iterations=-it)] = 0
    return out


def add_blob(labels, rng, radius, min_distance):
    """Paint a lip-label disk at least ``min_distance`` px from every lip pixel.

    Returns (labels, placed).  The distance accounts for the disk radius.
    """
    lips = labels > 0
    if not lips.any():
        return labels, False
    D = dt.distance_transform(lips)
    ok = np.argwhere(D >= min_distance + radius + 1)
    if len(ok) == 0:
        return labels, False
    r, c = ok[rng.integers(len(ok))]
    rr, cc = np.indices(labels.shape)
    disk = (rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2
    out = labels.copy()
    out[disk] = rng.integers(1, 3)
    return out, True


def corrupt_observations(observations, config):
    """Noisy copies of observations; a zero config returns exact copies."""
    rng = np.random.default_rng(config.seed)
    res = []
    for o in observations:
        img = o.image.copy()
        lm = o.landmarks.copy()
        labels = o.lip_labels.copy()
        if config.landmark_sigma > 0:
            lm = lm + rng.normal(0, config.landmark_sigma, lm.shape)
        if config.mask_morph:
            labels = _morph(labels, config.mask_morph)
        for _ in range(config.blobs):
            labels, _ = add_blob(labels, rng, config.blob_radius, config.blob_min_distance)
        if config.image_sigma > 0:
            img = np.clip(img + rng.normal(0, config.image_sigma, img.shape), 0, 1)
        res.append(FrameObservation(img, lm, o.landmark_valid.copy(), labels, o.is_neutral))
    return res
