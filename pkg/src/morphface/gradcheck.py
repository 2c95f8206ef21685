"""Finite-difference validation of the full objective gradient on small random scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import PyramidFeatures
from .losses import LossWeights
from .model import MorphableModel, build_upsampling
from .objective import ALL_TERMS, ClipParams, FrameObservation, Rig, evaluate_clip, forward_frame, safe_project
from .scene import Camera
from .template import dynamic_landmark_ids, make_template

SMALL_TEMPLATE = dict(spacing=11.0, half_width=65.0, half_height=72.0, graph_nodes=12)
BLOCKS = ("alpha", "beta", "delta", "gamma", "rotation", "translation", "M_gid", "M_gexp", "M_R")


@dataclass
class Scene:
    rig: Rig
    model: MorphableModel
    params: ClipParams
    observations: list
    weights: LossWeights


_TEMPLATE_CACHE = {}


def small_rig(size=16):
    key = size
    if key not in _TEMPLATE_CACHE:
        tpl = make_template(**SMALL_TEMPLATE)
        graph = build_upsampling(tpl)
        _TEMPLATE_CACHE[key] = (tpl, graph)
    tpl, graph = _TEMPLATE_CACHE[key]
    cam = Camera.for_template(tpl, width=size)
    return Rig(tpl, graph, cam, PyramidFeatures(levels=3))


def random_scene(seed, size=16, dims=(3, 2, 3), n_frames=2):
    """A random model, clip parameters and a perturbed-twin target clip."""
    rng = np.random.default_rng(seed)
    rig = small_rig(size)
    tpl, graph = rig.template, rig.graph
    G, N = graph.node_count, tpl.vertex_count
    m_i, m_e, m_r = dims
    model = MorphableModel(rng.normal(0, 2.0, (3 * G, m_i)), rng.normal(0, 2.0, (3 * G, m_e)),
                           rng.normal(0, 0.05, (3 * N, m_r)))

    def draw():
        p = ClipParams.initial(dims, n_frames)
        p.alpha[:] = rng.normal(0, 1, m_i)
        p.beta[:] = rng.normal(0, 1, m_r)
        p.delta[:] = rng.normal(0, 1, (n_frames, m_e))
        p.gamma += rng.normal(0, 0.1, p.gamma.shape)
        p.rotation[:] = rng.normal(0, 0.15, (n_frames, 3))
        p.translation[:, :2] += rng.normal(0, 5, (n_frames, 2))
        p.translation[:, 2] += rng.normal(0, 10, n_frames)
        return p

    target, params = draw(), draw()
    obs = []
    for i in range(n_frames):
        st = forward_frame(rig, model, target, i)
        proj, _ = safe_project(st.vcam, rig.camera)
        lm = proj[dynamic_landmark_ids(tpl, proj)] + rng.normal(0, 0.5, (66, 2))
        obs.append(FrameObservation(st.out.image(), lm, np.ones(66, bool),
                                    st.out.label_image(tpl.triangle_lip_labels), is_neutral=(i == 0)))
    weights = LossWeights(seg=0.1, pho=1.0, per=0.5, smo=0.1, dis=1.0, tau=3.0, land=1.0, land_mean=0.3)
    return Scene(rig, model, params, obs, weights)


def _get(scene, block):
    return getattr(scene.model if block.startswith("M_") else scene.params, block)


def _loss_and_visibility(scene):
    rep = evaluate_clip(scene.rig, scene.model, scene.params, scene.observations, scene.weights,
                        ALL_TERMS, grad=False)
    vis = [forward_frame(scene.rig, scene.model, scene.params, i).out.tri_id.copy()
           for i in range(scene.params.n_frames)]
    return rep.value, vis


STEP = {"alpha": 1e-5, "beta": 1e-5, "delta": 1e-5, "gamma": 1e-6, "rotation": 1e-7,
        "translation": 1e-5, "M_gid": 1e-5, "M_gexp": 1e-5, "M_R": 1e-6}


def check_scene(scene, samples=6, rtol=1e-4, seed=0):
    """Compare analytic and central-difference gradients on sampled coordinates.

    Coordinates whose perturbation changes any pixel's visible triangle are
    excluded.  Returns a list of (block, index, analytic, numeric, ok).
    """
    rng = np.random.default_rng(seed)
    rep = evaluate_clip(scene.rig, scene.model, scene.params, scene.observations, scene.weights, ALL_TERMS)
    _, vis0 = _loss_and_visibility(scene)
    records = []
    for block in BLOCKS:
        arr = _get(scene, block)
        flat = arr.reshape(-1)
        g = rep.grads[block].reshape(-1)
        if block == "M_R":
            # only rows of vertices that are visible carry photometric signal
            pool = np.flatnonzero(g)
            pool = pool if len(pool) else np.arange(flat.size)
        else:
            pool = np.arange(flat.size)
        picks = rng.choice(pool, size=min(samples, len(pool)), replace=False)
        for idx in picks:
            h = STEP[block] * max(1.0, abs(flat[idx]))
            x0 = flat[idx]
            flat[idx] = x0 + h
            fp, vp = _loss_and_visibility(scene)
            flat[idx] = x0 - h
            fm, vm = _loss_and_visibility(scene)
            flat[idx] = x0
            if any((a != b).any() for a, b in zip(vis0, vp)) or any((a != b).any() for a, b in zip(vis0, vm)):
                continue
            num = (fp - fm) / (2 * h)
            ana = g[idx]
            scale = max(abs(num), abs(ana), 1e-6 * max(1.0, abs(rep.value)))
            records.append((block, int(idx), float(ana), float(num), abs(num - ana) <= rtol * scale))
    return records


def run_suite(n_scenes=20, size=16, seed=0, samples=6, rtol=1e-4):
    out = []
    for k in range(n_scenes):
        scene = random_scene(seed * 1000 + k, size=size)
        out += check_scene(scene, samples=samples, rtol=rtol, seed=k)
    return out


def pass_rate(records):
    return float(np.mean([r[4] for r in records])) if records else 0.0
