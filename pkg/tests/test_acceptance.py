"""Exit criteria.  Each test records one PASS/FAIL line, repeated in the terminal summary.

The learning criteria (5 to 8) train real models and dominate the runtime.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from morphface import dt, metrics, optim, synth
from morphface.gradcheck import pass_rate, run_suite, small_rig
from morphface.model import init_model
from morphface.objective import FrameObservation, evaluate_clip, forward_frame
from morphface.raster import render
from morphface.scene import euler_matrix

from oracles import brute_force_distance, brute_force_render, random_triangle_scene

DESK_DIMS = (8, 6, 8)


def _angle_deg(r_est, r_true):
    dR = euler_matrix(r_est) @ euler_matrix(r_true).T
    return float(np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1))))


def _masked_rmse(st, obs):
    m = st.out.mask
    return float(np.sqrt(np.mean((st.out.image()[m] - obs.image[m]) ** 2)))


def _hide_neutral(obs):
    return [FrameObservation(o.image, o.landmarks, o.landmark_valid, o.lip_labels, False) for o in obs]


def _fit_config(weights):
    """Evaluation fits use the run's segmentation weight and no smoothness."""
    base = optim.FitConfig()
    return replace(base, weights=replace(base.weights, seg=weights.seg, tau=weights.tau))


# --- 1 to 4: numerical foundations ----------------------------------------------------------

def test_gradient_suite(criterion):
    assert len(small_rig(16).template.triangles) <= 200
    t = time.time()
    rec = run_suite(n_scenes=20, size=16, seed=0)
    secs = time.time() - t
    rate = pass_rate(rec)
    ok = rate >= 0.95 and secs < 300 and len(rec) > 0
    assert criterion(1, "gradient suite", ok,
                     f"{rate:.4f} of {len(rec)} sampled coordinates within 1e-4, 20 scenes, {secs:.0f}s")


def test_rendering_oracle(criterion):
    rng = np.random.default_rng(2024)
    t = time.time()
    worst, mismatched = 0.0, 0
    for _ in range(50):
        V, T, C, cam = random_triangle_scene(rng, n_tris=int(rng.integers(4, 16)), size=int(rng.integers(12, 24)))
        out = render(V, T, C, cam)
        tri, _, col = brute_force_render(V, T, C, cam)
        mismatched += int((out.tri_id != tri).sum() + (out.mask != (tri >= 0)).sum())
        worst = max(worst, float(np.abs(out.color - col).max()))
    secs = time.time() - t
    ok = mismatched == 0 and worst <= 1e-6 and secs < 60
    assert criterion(2, "rendering oracle", ok,
                     f"{mismatched} mask/triangle mismatches, max colour error {worst:.2e}, 50 scenes, {secs:.0f}s")


def test_distance_transform(criterion):
    rng = np.random.default_rng(7)
    t = time.time()
    unequal = 0
    for k in range(100):
        mask = rng.random((32, 32)) < rng.choice([0.002, 0.01, 0.05, 0.3])
        if k == 0:
            mask[:] = False
            mask[16, 16] = True
        ref = brute_force_distance(mask)
        got = dt.distance_transform(mask)
        unequal += int((got is None) != (ref is None) or (ref is not None and not np.array_equal(got, ref)))
    secs = time.time() - t
    ok = unequal == 0 and secs < 60
    assert criterion(3, "distance transform", ok, f"{unequal}/100 masks differ from brute force, {secs:.0f}s")


def test_fit_closure(criterion, desk_rig, world):
    clips = synth.sample_corpus(world, 20, 0, n_frames=4, seed=404)
    t = time.time()
    rot, depth, coef, rmse = [], [], [], []
    for c in clips:
        res = optim.fit_clip(desk_rig, world.model, c.observations)
        p, q = res.params, c.params
        coef.append(np.linalg.norm(p.alpha - q.alpha) / np.linalg.norm(q.alpha))
        for i, o in enumerate(c.observations):
            rot.append(_angle_deg(p.rotation[i], q.rotation[i]))
            depth.append(abs(p.translation[i, 2] - q.translation[i, 2]) / q.translation[i, 2])
            rmse.append(_masked_rmse(forward_frame(desk_rig, world.model, p, i), o))
    secs = time.time() - t
    ok = max(rot) < 1.0 and max(depth) < 0.01 and max(coef) < 0.05 and max(rmse) < 0.01 and secs < 900
    assert criterion(4, "fit closure", ok,
                     f"max rotation {max(rot):.3f} deg, depth {100 * max(depth):.3f}%, "
                     f"identity coefficients {max(coef):.4f}, photometric RMSE {max(rmse):.5f}, {secs:.0f}s")


# --- 5: learning closure ----------------------------------------------------------------------

def _fit_rmse(rig, model, clips, weights):
    cfg = _fit_config(weights)
    vals = []
    for c in clips:
        p = optim.fit_clip(rig, model, _hide_neutral(c.observations), cfg).params
        vals += [_masked_rmse(forward_frame(rig, model, p, i), o) for i, o in enumerate(c.observations)]
    return float(np.mean(vals))


def test_learning_closure(criterion, desk_rig, world):
    t = time.time()
    corpus = synth.sample_corpus(world, 200, 100, n_frames=4, seed=505)
    held = synth.sample_corpus(world, 8, 0, n_frames=4, seed=506)
    cfg = optim.CurriculumConfig(dims=DESK_DIMS)
    m0 = init_model(desk_rig.template, desk_rig.graph, DESK_DIMS, seed=0, scale=cfg.init_scale)
    state = optim.learn(optim.initial_state(m0, corpus), desk_rig, corpus, cfg)
    g, tpl = desk_rig.graph, desk_rig.template
    a_id = metrics.basis_angles(g, tpl, state.model.M_gid, world.model.M_gid).max()
    a_exp = metrics.basis_angles(g, tpl, state.model.M_gexp, world.model.M_gexp).max()
    before = _fit_rmse(desk_rig, m0, held, cfg.weights)
    after = _fit_rmse(desk_rig, state.model, held, cfg.weights)
    secs = time.time() - t
    ok = a_id < 15 and a_exp < 15 and before >= 3 * after and secs < 4 * 3600
    assert criterion(5, "learning closure", ok,
                     f"max angle identity {a_id:.1f} deg, expression {a_exp:.1f} deg; held-out photometric "
                     f"RMSE {before:.4f} -> {after:.4f} ({before / after:.2f}x); {secs / 60:.0f} min")


# --- 6 to 8: ablations on a shared smaller corpus ---------------------------------------------

ABLATION_CLIPS, ABLATION_NEUTRAL = 40, 30


def _ablation_config(**weights):
    cfg = optim.CurriculumConfig(dims=DESK_DIMS)
    cfg.stages["identity"].iterations = 10 * ABLATION_NEUTRAL
    cfg.stages["combined"].iterations = 10 * (ABLATION_CLIPS + ABLATION_NEUTRAL)
    cfg.weights = replace(cfg.weights, **weights)
    return cfg


class Ablations:
    """Training runs shared by the ablation criteria, trained on demand."""

    def __init__(self, rig, world):
        self.rig, self.world = rig, world
        self.corpus = synth.sample_corpus(world, ABLATION_CLIPS, ABLATION_NEUTRAL, n_frames=4, seed=606)
        self.held = synth.sample_corpus(world, 6, 0, n_frames=4, seed=607)
        self.held_neutral = synth.sample_corpus(world, 0, 12, seed=608)
        self.runs = {}

    def blob_corpus(self, tau):
        noise = synth.NoiseConfig(blobs=2, blob_min_distance=5 * tau, seed=9)
        return [replace(c, observations=synth.corrupt_observations(c.observations, noise)) for c in self.corpus]

    def run(self, name):
        if name not in self.runs:
            cfg = _ablation_config(**({"seg": 0.0} if name == "no_seg" else {"dis": 0.0} if name == "no_dis" else {}))
            corpus = self.blob_corpus(cfg.weights.tau) if name == "blobs" else self.corpus
            m0 = init_model(self.rig.template, self.rig.graph, DESK_DIMS, seed=0, scale=cfg.init_scale)
            state = optim.learn(optim.initial_state(m0, corpus), self.rig, corpus, cfg)
            self.runs[name] = (state, cfg)
        return self.runs[name]

    def lip_iou(self, name):
        state, cfg = self.run(name)
        fc = _fit_config(cfg.weights)
        up, lo = [], []
        for c in self.held:
            p = optim.fit_clip(self.rig, state.model, _hide_neutral(c.observations), fc).params
            for i, o in enumerate(c.observations):
                st = forward_frame(self.rig, state.model, p, i)
                iou = metrics.lip_iou(st.out.label_image(self.rig.template.triangle_lip_labels), o.lip_labels)
                up.append(iou["upper"])
                lo.append(iou["lower"])
        return float(np.mean(up)), float(np.mean(lo))

    def neutral_energy(self, name):
        state, cfg = self.run(name)
        fc = _fit_config(cfg.weights)
        deltas = [optim.fit_clip(self.rig, state.model, _hide_neutral(c.observations), fc).params.delta[0]
                  for c in self.held_neutral]
        return metrics.neutral_expression_energy(self.rig.graph, state.model.M_gexp, deltas)


@pytest.fixture(scope="module")
def ablations(desk_rig, world):
    return Ablations(desk_rig, world)


def test_segmentation_ablation(criterion, ablations):
    with_up, with_lo = ablations.lip_iou("baseline")
    wo_up, wo_lo = ablations.lip_iou("no_seg")
    ok = with_up - wo_up >= 0.02 and with_lo - wo_lo >= 0.02
    assert criterion(6, "segmentation ablation", ok,
                     f"upper IoU {with_up:.3f} vs {wo_up:.3f}, lower IoU {with_lo:.3f} vs {wo_lo:.3f} (with vs without)")


def test_disentanglement_ablation(criterion, ablations):
    with_dis = ablations.neutral_energy("baseline")
    without = ablations.neutral_energy("no_dis")
    ok = with_dis <= 0.1 * without
    assert criterion(7, "disentanglement ablation", ok,
                     f"neutral expression energy {with_dis:.4g} with vs {without:.4g} without "
                     f"(ratio {with_dis / max(without, 1e-300):.3f})")


def test_blob_robustness(criterion, ablations):
    rig = ablations.rig
    cfg = _ablation_config()
    dirty = ablations.blob_corpus(cfg.weights.tau)
    assert any((d.lip_labels != o.lip_labels).any()
               for cd, co in zip(dirty, ablations.corpus) for d, o in zip(cd.observations, co.observations))
    # the first segmentation evaluation happens after the landmark-only pose stage
    m0 = init_model(rig.template, rig.graph, DESK_DIMS, seed=0, scale=cfg.init_scale)
    state = optim.run_stage_pose(optim.initial_state(m0, ablations.corpus), rig, ablations.corpus, cfg)
    change = 0.0
    for k, (cc, cd) in enumerate(zip(ablations.corpus, dirty)):
        a = evaluate_clip(rig, state.model, state.params[k], cc.observations, cfg.weights, ("seg",), grad=False)
        b = evaluate_clip(rig, state.model, state.params[k], cd.observations, cfg.weights, ("seg",), grad=False)
        change = max(change, abs(a.terms["seg"] - b.terms["seg"]))
    clean_up, clean_lo = ablations.lip_iou("baseline")
    blob_up, blob_lo = ablations.lip_iou("blobs")
    drop = max(clean_up - blob_up, clean_lo - blob_lo)
    ok = change == 0.0 and drop < 0.02
    assert criterion(8, "blob robustness", ok,
                     f"first segmentation-loss change {change:.3g}; IoU clean {clean_up:.3f}/{clean_lo:.3f} "
                     f"vs blobs {blob_up:.3f}/{blob_lo:.3f} (largest drop {drop:.3f})")


# --- 9: invariants --------------------------------------------------------------------------

def test_invariant_regression(criterion):
    rig = small_rig(32)
    world = synth.make_gt_model(rig, (3, 2, 3), seed=3)
    corpus = synth.sample_corpus(world, 3, 3, n_frames=2, seed=3)
    cfg = optim.CurriculumConfig(dims=(3, 2, 3), log_every=1)
    cfg.stages["pose"].iterations = 5
    cfg.stages["identity"].iterations = 12
    cfg.stages["combined"].iterations = 24
    m0 = init_model(rig.template, rig.graph, (3, 2, 3), seed=1, scale=0.05)
    problems = []

    def run():
        state = optim.initial_state(m0, corpus, seed=2)
        before = [p.copy() for p in state.params]
        optim.run_stage_pose(state, rig, corpus, cfg)
        if state.model.digest() != m0.digest():
            problems.append("pose stage changed the model")
        for p, q in zip(before, state.params):
            if any(not np.array_equal(getattr(p, b), getattr(q, b)) for b in ("alpha", "beta", "delta", "gamma")):
                problems.append("pose stage changed non-pose parameters")
        gexp = state.model.M_gexp.copy()
        optim.run_stage_identity(state, rig, corpus, cfg)
        if not np.array_equal(state.model.M_gexp, gexp):
            problems.append("identity stage changed the expression basis")
        if any(np.any(state.params[k].delta != 0) for k, c in enumerate(corpus) if c.neutral):
            problems.append("identity stage left nonzero expression")
        optim.run_stage_combined(state, rig, corpus, cfg)
        return state

    a, b = run(), run()
    orth = [e["orthogonality"] for e in a.trace if e["stage"] == "combined"]
    if len(orth) != cfg.stages["combined"].iterations or max(orth) > 1e-8:
        problems.append(f"orthogonality {max(orth):.2e} over {len(orth)} logged iterations")
    la, lb = np.array([e["loss"] for e in a.trace]), np.array([e["loss"] for e in b.trace])
    gap = float(np.max(np.abs(la - lb) / np.maximum(1.0, np.abs(la)))) if len(la) == len(lb) else np.inf
    if gap > 1e-12:
        problems.append(f"loss trajectories differ by {gap:.2e}")
    ok = not problems
    assert criterion(9, "invariant regression", ok,
                     "; ".join(problems) or f"orthogonality <= {max(orth):.1e} on {len(orth)} logged iterations, "
                     f"freeze contracts exact, trajectories identical ({len(la)} entries)")
