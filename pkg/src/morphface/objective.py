"""Per-clip forward model and the reverse-mode gradient of the full objective.

Forward chain for frame i of a clip::

    d_i   = M_gid alpha + M_gexp delta_i              (graph level, G x 3)
    V_i   = V_mean + U d_i                            (N x 3)
    R     = R_mean + M_R beta                         (N x 3, shared by the clip)
    Vc_i  = V_i Rot_i^T + t_i                         (camera space)
    C_i   = shade(R, normals(Vc_i), gamma_i)          (per-vertex colour)
    S_i   = render(Vc_i, C_i)

Every loss term reads some of these quantities; their gradients are pulled
back through the same chain in reverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .features import PyramidFeatures
from .mesh import compute_normals, normals_backward
from .model import node_deformation
from .raster import CONTOUR_KEYS, backward as raster_backward, extract_mesh_lip_contours, render
from .scene import NEAR, RigidPose, euler_matrix, pose_backward, project_backward, rest_translation, shade, shade_backward
from .template import dynamic_landmark_ids

PARAM_BLOCKS = ("alpha", "beta", "delta", "gamma", "rotation", "translation")
MODEL_BLOCKS = ("M_gid", "M_gexp", "M_R")
ALL_TERMS = ("land", "land_mean", "seg", "pho", "per", "smo", "dis")


@dataclass
class Rig:
    """Everything fixed during learning: template, graph, camera, feature extractor."""
    template: object
    graph: object
    camera: object
    extractor: object = field(default_factory=PyramidFeatures)
    shared_lighting: bool = False
    contour_per_edge: int = 2

    def __post_init__(self):
        self.laplacian = self.graph.laplacian.tocsr()
        self.tri_lip_labels = self.template.triangle_lip_labels


@dataclass
class FrameParams:
    delta: np.ndarray
    gamma: np.ndarray        # (3, 9)
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def pose(self):
        return RigidPose(self.rotation, self.translation)


@dataclass
class ClipParams:
    alpha: np.ndarray            # (m_i,)
    beta: np.ndarray             # (m_r,)
    delta: np.ndarray            # (F, m_e)
    gamma: np.ndarray            # (F, 3, 9)
    rotation: np.ndarray         # (F, 3)
    translation: np.ndarray      # (F, 3)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        self.delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
        F = len(self.delta)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(F, 3, 9)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(F, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(F, 3)

    @classmethod
    def initial(cls, dims, n_frames, gamma0=None):
        m_i, m_e, m_r = dims
        if gamma0 is None:
            gamma0 = default_lighting()
        return cls(alpha=np.zeros(m_i), beta=np.zeros(m_r), delta=np.zeros((n_frames, m_e)),
                   gamma=np.tile(np.asarray(gamma0, dtype=float).reshape(1, 3, 9), (n_frames, 1, 1)),
                   rotation=np.zeros((n_frames, 3)),
                   translation=np.tile(rest_translation(), (n_frames, 1)))

    @property
    def n_frames(self):
        return len(self.delta)

    def frame(self, i):
        return FrameParams(self.delta[i], self.gamma[i], self.rotation[i], self.translation[i])

    def blocks(self):
        return {k: getattr(self, k) for k in PARAM_BLOCKS}

    def copy(self):
        return ClipParams(**{k: v.copy() for k, v in self.blocks().items()})

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.blocks().values())

    def to_dict(self):
        return {k: v.tolist() for k, v in self.blocks().items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in PARAM_BLOCKS})

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_lighting():
    """Mostly ambient light with a frontal component (normals facing the camera have n_z < 0)."""
    g = np.zeros((3, 9))
    g[:, 0] = 0.7 / 0.2820948
    g[:, 2] = -0.3 / 0.4886025
    return g


@dataclass
class FrameObservation:
    image: np.ndarray                 # (H, W, 3) in [0, 1]
    landmarks: np.ndarray             # (66, 2) pixel coordinates
    landmark_valid: np.ndarray        # (66,) bool
    lip_labels: np.ndarray            # (H, W) in {0, 1, 2}
    is_neutral: bool = False
    _dt: dict = field(default=None, repr=False)
    _feat: list = field(default=None, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.landmarks = np.asarray(self.landmarks, dtype=float)
        self.landmark_valid = np.asarray(self.landmark_valid, dtype=bool)
        self.lip_labels = np.asarray(self.lip_labels, dtype=np.int64)

    @property
    def dt(self):
        if self._dt is None:
            self._dt = L.distance_transform_set(self.lip_labels)
        return self._dt

    def features(self, extractor):
        if self._feat is None:
            self._feat = extractor(self.image)
        return self._feat


@dataclass
class FrameState:
    d: np.ndarray
    V: np.ndarray
    vcam: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    out: object
    pose: RigidPose


def safe_project(vcam, camera):
    z = vcam[:, 2]
    ok = z > NEAR
    zz = np.where(ok, z, 1.0)
    f = camera.focal
    cx, cy = camera.principal
    return np.column_stack([cx + f * vcam[:, 0] / zz, cy + f * vcam[:, 1] / zz]), ok


def reflectance(rig, model, beta):
    return rig.template.reflectance + (model.M_R @ beta).reshape(-1, 3)


def forward_frame(rig, model, params, i, R=None, need_render=True):
    fp = params.frame(i)
    d = node_deformation(model, params.alpha, fp.delta)
    V = rig.template.positions + rig.graph.upsample(d)
    pose = fp.pose
    vcam = V @ euler_matrix(pose.rotation).T + pose.translation
    if not need_render:
        return FrameState(d, V, vcam, None, None, None, pose)
    if R is None:
        R = reflectance(rig, model, params.beta)
    n = compute_normals(vcam, rig.template.triangles)
    C = shade(R, n, fp.gamma)
    out = render(vcam, rig.template.triangles, C, rig.camera)
    return FrameState(d, V, vcam, n, C, out, pose)


def _active(terms, weights):
    return {t for t in terms if getattr(weights, L.TERM_WEIGHT[t]) > 0}


def evaluate_clip(rig, model, params, observations, weights, terms=ALL_TERMS, grad=True):
    """Objective value, unweighted term values and gradients for one clip.

    ``terms`` restricts which loss terms are evaluated (a term with zero
    weight is skipped too).  Gradients cover every parameter block and model
    matrix; callers ignore the blocks they keep frozen.
    """
    if len(observations) != params.n_frames:
        raise ValueError("one observation per frame is required")
    active = _active(terms, weights)
    tpl, cam = rig.template, rig.camera
    need_render = bool(active & {"seg", "pho", "per"})
    R = reflectance(rig, model, params.beta)
    vals = {t: 0.0 for t in active}
    diag = {"landmarks_skipped": 0, "seg_pairs_skipped": 0, "per_levels_skipped": 0}
    m_i, m_e, m_r = model.dims
    G = {
        "alpha": np.zeros(m_i), "beta": np.zeros(m_r),
        "delta": np.zeros_like(params.delta), "gamma": np.zeros_like(params.gamma),
        "rotation": np.zeros_like(params.rotation), "translation": np.zeros_like(params.translation),
        "M_gid": np.zeros_like(model.M_gid), "M_gexp": np.zeros_like(model.M_gexp),
        "M_R": np.zeros_like(model.M_R),
    }
    g_R = np.zeros_like(R)
    for i, obs in enumerate(observations):
        st = forward_frame(rig, model, params, i, R=R, need_render=need_render)
        g_vc = np.zeros_like(st.vcam)
        g_pose_direct = (np.zeros(3), np.zeros(3))

        if "land" in active or "land_mean" in active:
            for name, V_src in (("land", None), ("land_mean", tpl.positions)):
                if name not in active:
                    continue
                vc = st.vcam if V_src is None else V_src @ euler_matrix(st.pose.rotation).T + st.pose.translation
                proj, ok = safe_project(vc, cam)
                ids = dynamic_landmark_ids(tpl, proj)
                usable = obs.landmark_valid & ok[ids]
                diag["landmarks_skipped"] += int((obs.landmark_valid & ~ok[ids]).sum())
                v, g_p = L.landmark_loss(proj[ids], obs.landmarks, usable)
                vals[name] += v
                if grad:
                    w = getattr(weights, L.TERM_WEIGHT[name])
                    g_l = np.zeros_like(vc)
                    np.add.at(g_l, ids[usable], w * project_backward(vc[ids[usable]], cam, g_p[usable]))
                    if V_src is None:
                        g_vc += g_l
                    else:
                        _, gr, gt = pose_backward(V_src, st.pose, g_l)
                        g_pose_direct = (g_pose_direct[0] + gr, g_pose_direct[1] + gt)

        g_S = None
        if need_render:
            out = st.out
            # observations are clipped to [0, 1], so compare clipped colour; saturated channels pass no gradient
            S = out.image()
            g_S = np.zeros_like(out.color)
            if "pho" in active:
                v, g = L.photometric_loss(obs.image, S, out.mask)
                vals["pho"] += v
                g_S += weights.pho * g
            if "per" in active:
                v, g, skipped = L.perceptual_loss(obs.image, S, rig.extractor,
                                                  obs.features(rig.extractor))
                vals["per"] += v
                diag["per_levels_skipped"] += len(skipped)
                g_S += weights.per * g
            if "seg" in active:
                contours = extract_mesh_lip_contours(out, tpl, rig.contour_per_edge)
                g_pts_v = np.zeros_like(st.vcam)
                for key in CONTOUR_KEYS:
                    pts = contours[key]
                    v, g, info = L.segmentation_pair_loss(pts.positions, obs.dt[key], weights.tau)
                    if info["skipped"]:
                        diag["seg_pairs_skipped"] += 1
                        continue
                    vals["seg"] += v
                    if grad:
                        g_pts_v += pts.backward(st.vcam, cam, g)
                g_vc += weights.seg * g_pts_v

        if "dis" in active and obs.is_neutral:
            v, g = L.disentanglement_loss(params.delta[i], True)
            vals["dis"] += v
            if grad:
                G["delta"][i] += weights.dis * g.ravel()

        g_d = np.zeros_like(st.d)
        if "smo" in active:
            v, g = L.smoothness_loss(st.d, rig.laplacian)
            vals["smo"] += v
            g_d += weights.smo * g

        if not grad:
            continue
        if need_render and g_S is not None:
            g_S = np.where((st.out.color >= 0.0) & (st.out.color <= 1.0), g_S, 0.0)
            gv_r, g_C = raster_backward(st.out, g_S)
            g_vc += gv_r
            g_r, g_n, g_gam = shade_backward(R, st.normals, params.gamma[i], g_C)
            g_R += g_r
            G["gamma"][i] += g_gam
            g_vc += normals_backward(st.vcam, tpl.triangles, g_n)
        g_V, g_rot, g_t = pose_backward(st.V, st.pose, g_vc)
        G["rotation"][i] += g_rot + g_pose_direct[0]
        G["translation"][i] += g_t + g_pose_direct[1]
        g_d += rig.graph.pullback(g_V)
        gd = g_d.ravel()
        G["alpha"] += model.M_gid.T @ gd
        G["delta"][i] += model.M_gexp.T @ gd
        G["M_gid"] += np.outer(gd, params.alpha)
        G["M_gexp"] += np.outer(gd, params.delta[i])

    if grad:
        gr = g_R.ravel()
        G["beta"] += model.M_R.T @ gr
        G["M_R"] += np.outer(gr, params.beta)
        if rig.shared_lighting:
            G["gamma"][:] = G["gamma"].sum(axis=1, keepdims=True)
    total = L.total_loss(vals, weights)
    return L.LossReport(value=total, terms=vals, grads=G if grad else {}, diagnostics=diag)
