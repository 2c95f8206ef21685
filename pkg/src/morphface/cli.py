"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, optim, storage, synth
from .gradcheck import pass_rate, run_suite
from .losses import LossWeights, NumericalError, distance_transform_set
from .model import DimensionError, assemble_geometry, build_upsampling, init_model, load_model, save_model
from .objective import ClipParams, FrameObservation, Rig, evaluate_clip, forward_frame
from .scene import Camera
from .template import TemplateError, make_template

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_config():
    return {
        "curriculum": optim.CurriculumConfig().to_dict(),
        "fit": optim.FitConfig().to_dict(),
        "sampling": synth.SamplingConfig().to_dict(),
        "noise": synth.NoiseConfig().to_dict(),
        "template": {"spacing": 3.1, "graph_nodes": 80},
    }


def _load_config(path):
    cfg = default_config()
    if path:
        user = storage.read_json(path)
        for k, v in user.items():
            if k not in cfg:
                raise storage.DataError(f"unknown config section {k!r}")
            if isinstance(v, dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    return cfg


def _dims(text):
    try:
        d = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("dims must be three comma-separated integers")
    if len(d) != 3 or min(d) < 0:
        raise argparse.ArgumentTypeError("dims must be three comma-separated integers")
    return d


def _weights_from(args, base):
    w = LossWeights(**base) if isinstance(base, dict) else base
    for k in ("seg", "pho", "per", "smo", "dis", "tau", "land_mean"):
        v = getattr(args, f"w_{k}", None)
        if v is not None:
            setattr(w, k, v)
    LossWeights(**w.to_dict())
    return w


def _add_weight_flags(p):
    for k in ("seg", "pho", "per", "smo", "dis", "tau", "land_mean"):
        p.add_argument(f"--{k.replace('_', '-')}", dest=f"w_{k}", type=float, default=None,
                       help=f"override the {k} loss weight")


# --- subcommands ---------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args.config)
    tcfg = cfg["template"]
    tpl = make_template(spacing=tcfg["spacing"], graph_nodes=tcfg["graph_nodes"])
    rig = Rig(tpl, build_upsampling(tpl), Camera.for_template(tpl, width=args.size))
    world = synth.make_gt_model(rig, args.dims, seed=args.world_seed,
                                config=synth.SamplingConfig(**cfg["sampling"]))
    clips = synth.sample_corpus(world, args.clips, args.neutral, args.frames, seed=args.seed)
    noise = synth.NoiseConfig(**{**cfg["noise"], **{k: v for k, v in (
        ("landmark_sigma", args.landmark_sigma), ("mask_morph", args.mask_morph), ("blobs", args.blobs),
        ("blob_min_distance", args.blob_distance), ("image_sigma", args.image_sigma)) if v is not None}})
    if not noise.is_zero():
        for c in clips:
            c.observations = synth.corrupt_observations(c.observations, noise)
            c.images_u8 = [synth.to_u8(o.image) for o in c.observations]
    out = Path(args.out)
    info = {"seed": args.seed, "world_seed": args.world_seed, "frames": args.frames, "noise": noise.to_dict()}
    storage.write_corpus(out, rig, clips, info=info, world=world)
    storage.write_manifest(out, "synth", sys.argv[1:], {**cfg, "dims": list(args.dims), **info},
                           outputs=[out / "world_model.bin", out / "corpus.json"])
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def _curriculum(cfg, args):
    cur = optim.CurriculumConfig.from_dict(cfg["curriculum"])
    if args.seed is not None:
        cur.seed = args.seed
    cur.weights = _weights_from(args, cur.weights)
    for name, value in (("pose", args.pose_iterations), ("identity", args.identity_iterations),
                        ("combined", args.combined_iterations)):
        if value is not None:
            cur.stages[name].iterations = value
    return cur


def cmd_learn(args):
    cfg = _load_config(args.config)
    stages = tuple(s for s in args.stages.split(",") if s)
    bad = [s for s in stages if s not in optim.STAGES]
    if bad:
        raise UsageError(f"unknown stage(s): {', '.join(bad)}")
    rig, clips, meta = storage.read_corpus(args.corpus, float_images=not args.u8)
    cur = _curriculum(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = optim.TrainState.load(args.resume)
    else:
        model = load_model(args.init_model) if args.init_model else \
            init_model(rig.template, rig.graph, cur.dims, seed=cur.seed, scale=cur.init_scale)
        model.check(rig.template, rig.graph)
        state = optim.initial_state(model, clips, seed=cur.seed)
    t0 = time.time()
    try:
        optim.learn(state, rig, clips, cur, stages=stages, checkpoint=out / "state.npz")
    finally:
        with open(out / "trace.jsonl", "w") as fh:
            for e in state.trace:
                fh.write(json.dumps(e) + "\n")
    save_model(state.model, out / "model.bin")
    state.save(out / "state.npz")
    inputs = [Path(args.corpus) / "corpus.json"] + ([Path(args.init_model)] if args.init_model else [])
    storage.write_manifest(out, "learn", sys.argv[1:], {**cfg, "curriculum": cur.to_dict(), "stages": list(stages)},
                           inputs=inputs, outputs=[out / "model.bin"],
                           extra={"seconds": time.time() - t0, "model_digest": state.model.digest()})
    print(f"stages {','.join(stages) or '-'} done; model {state.model.digest()[:16]} -> {out / 'model.bin'}")
    return EXIT_OK


def _fit_config(cfg, args):
    fc = optim.FitConfig.from_dict(cfg["fit"])
    fc.weights = _weights_from(args, fc.weights)
    return fc


def _fit_one(rig, model, obs, fc):
    res = optim.fit_clip(rig, model, obs, fc)
    return res.params, {"loss": res.loss, "converged": bool(res.converged)}


def cmd_fit(args):
    cfg = _load_config(args.config)
    fc = _fit_config(cfg, args)
    model = load_model(args.model)
    names = args.clips.split(",") if args.clips else None
    rig, clips, meta = storage.read_corpus(args.corpus, float_images=not args.u8, neutral_flags=False, names=names)
    model.check(rig.template, rig.graph)
    out = Path(args.out)
    summary = {}
    for c in clips:
        p, info = _fit_one(rig, model, c.observations, fc)
        d = out / c.name
        d.mkdir(parents=True, exist_ok=True)
        p.save(d / "params.json")
        (d / "fit.json").write_text(json.dumps(info, indent=1))
        summary[c.name] = info
        print(f"{c.name}: loss {info['loss']:.6g} converged={info['converged']}")
    storage.write_manifest(out, "fit", sys.argv[1:], {"fit": fc.to_dict()},
                           inputs=[Path(args.model)], extra={"clips": summary})
    return EXIT_OK


def cmd_render(args):
    from .visualize import normal_map, panel
    rig, clips, _ = storage.read_corpus(args.corpus, names=[args.clip])
    if not clips:
        raise storage.DataError(f"clip {args.clip!r} not in corpus")
    clip = clips[0]
    model = load_model(args.model)
    model.check(rig.template, rig.graph)
    if args.params:
        params = ClipParams.load(args.params)
    elif clip.params is not None:
        params = clip.params
    else:
        raise storage.DataError("no parameters: pass --params")
    if params.n_frames != len(clip.observations) or params.alpha.shape[0] != model.dims[0]:
        raise storage.DataError("parameters do not match the clip or the model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, o in enumerate(clip.observations):
        strip, st = panel(rig, model, params, i, o.image)
        storage.write_png(out / f"frame_{i}.panel.png", strip)
        storage.write_png(out / f"frame_{i}.render.png", st.out.image())
        storage.write_png(out / f"frame_{i}.normals.png", normal_map(rig, st))
        np.save(out / f"frame_{i}.render.npy", st.out.image())
        written += [out / f"frame_{i}.panel.png", out / f"frame_{i}.render.npy"]
    storage.write_manifest(out, "render", sys.argv[1:], {"clip": args.clip},
                           inputs=[Path(args.model)], outputs=written)
    print(f"rendered {len(clip.observations)} frames to {out}")
    return EXIT_OK


def evaluate(rig, model, clips, world=None, fits=None, oracle=False, fit_config=None, corpus_meta=None):
    """EvalReport over ``clips`` (whose ``params`` hold the generating parameters if known)."""
    items = []
    for c in clips:
        if oracle:
            if c.params is None:
                raise storage.DataError(f"{c.name}: --oracle needs generating parameters")
            p = c.params
        elif fits is not None:
            p = ClipParams.load(Path(fits) / c.name / "params.json")
        else:
            hidden = [FrameObservation(o.image, o.landmarks, o.landmark_valid, o.lip_labels, False)
                      for o in c.observations]
            p = optim.fit_clip(rig, model, hidden, fit_config).params
        for i, o in enumerate(c.observations):
            st = forward_frame(rig, model, p, i)
            item = {"clip": c.name, "frame": i, "neutral": bool(c.neutral)}
            if world is not None and c.params is not None:
                V = st.V
                Vt = assemble_geometry(rig.template, rig.graph, world.model, c.params.alpha, c.params.delta[i])
                item["rmse_similarity"] = metrics.vertex_rmse(V, Vt, "similarity")
                item["rmse_rigid"] = metrics.vertex_rmse(V, Vt, "rigid")
            iou = metrics.lip_iou(st.out.label_image(rig.template.triangle_lip_labels), o.lip_labels)
            item["iou_upper"], item["iou_lower"] = iou["upper"], iou["lower"]
            item["expression_energy"] = metrics.expression_energy(rig.graph, model.M_gexp, p.delta[i])
            m = st.out.mask
            item["photometric_rmse"] = float(np.sqrt(np.mean((st.out.image()[m] - o.image[m]) ** 2))) if m.any() else None
            items.append(item)
    angles = {}
    if world is not None:
        g, tpl = rig.graph, rig.template
        angles["identity"] = metrics.basis_angles(g, tpl, model.M_gid, world.model.M_gid).tolist()
        angles["expression"] = metrics.basis_angles(g, tpl, model.M_gexp, world.model.M_gexp).tolist()
        angles["reflectance"] = metrics.subspace_angles(model.M_R, world.model.M_R).tolist()
    prov = {"model_digest": model.digest(), "corpus_seed": (corpus_meta or {}).get("seed"),
            "config_digest": metrics.digest(fit_config.to_dict() if fit_config else {}), "oracle": oracle}
    return metrics.EvalReport(items=items, angles=angles, provenance=prov).check()


def cmd_eval(args):
    cfg = _load_config(args.config)
    fc = _fit_config(cfg, args)
    names = args.clips.split(",") if args.clips else None
    rig, clips, meta = storage.read_corpus(args.corpus, float_images=not args.u8, names=names)
    model = load_model(args.model) if args.model else load_model(Path(args.corpus) / "world_model.bin")
    model.check(rig.template, rig.graph)
    world_dir = Path(args.world or args.corpus)
    world = storage.read_world(world_dir, rig) if (world_dir / "world.json").exists() else None
    rep = evaluate(rig, model, clips, world, args.fits, args.oracle, fc, meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=1, default=float))
    print(rep.table())
    storage.write_manifest(out.parent, "eval", sys.argv[1:], {"fit": fc.to_dict(), "oracle": args.oracle},
                           outputs=[out], extra={"provenance": rep.provenance})
    return EXIT_OK


def cmd_gradcheck(args):
    rec = run_suite(n_scenes=args.scenes, size=args.size, seed=args.seed, samples=args.samples, rtol=args.rtol)
    rate = pass_rate(rec)
    blocks = sorted({r[0] for r in rec})
    for b in blocks:
        sub = [r for r in rec if r[0] == b]
        print(f"  {b:<12} {sum(r[4] for r in sub)}/{len(sub)}")
    print(f"pass rate: {rate:.4f} ({sum(r[4] for r in rec)}/{len(rec)} coordinates, {args.scenes} scenes)")
    if args.out:
        out = Path(args.out)
        storage.write_manifest(out, "gradcheck", sys.argv[1:], vars_of(args), extra={"pass_rate": rate})
    return EXIT_OK if rate >= args.min_rate else EXIT_NUMERIC


def cmd_dt(args):
    labels = storage.read_labels(args.lips)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (lip, side), e in distance_transform_set(labels).items():
        stem = f"{lip}_{side}"
        if e.empty:
            print(f"{stem}: empty contour")
            continue
        np.save(out / f"D_{stem}.npy", e.D)
        storage.write_png(out / f"D_{stem}.png", np.repeat((e.D / max(e.D.max(), 1e-12))[:, :, None], 3, axis=2))
        print(f"{stem}: {len(e.contour)} contour pixels, max distance {e.D.max():.3f}")
    storage.write_manifest(out, "dt", sys.argv[1:], {"lips": args.lips}, inputs=[Path(args.lips)])
    return EXIT_OK


def vars_of(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="morphface", description="Learn and fit a linear morphable face model by analysis by synthesis.")
    p.add_argument("--dump-config", action="store_true", help="print the full default configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a ground-truth world and corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=200)
    s.add_argument("--neutral", type=int, default=100)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--dims", type=_dims, default=(8, 6, 8))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--world-seed", type=int, default=1)
    s.add_argument("--landmark-sigma", type=float)
    s.add_argument("--mask-morph", type=int)
    s.add_argument("--blobs", type=int)
    s.add_argument("--blob-distance", type=float)
    s.add_argument("--image-sigma", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("learn", help="run the three-stage curriculum")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stages", default="pose,identity,combined")
    s.add_argument("--init-model")
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.add_argument("--pose-iterations", type=int)
    s.add_argument("--identity-iterations", type=int)
    s.add_argument("--combined-iterations", type=int)
    s.add_argument("--u8", action="store_true", help="train on the 8-bit images")
    s.add_argument("--config")
    _add_weight_flags(s)
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("fit", help="fit clip parameters with a frozen model")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--clips", help="comma-separated clip names (default: all)")
    s.add_argument("--out", required=True)
    s.add_argument("--u8", action="store_true")
    s.add_argument("--config")
    _add_weight_flags(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a clip with a model: images, normal maps, overlay panels")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--params")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="metrics report (JSON and table)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", help="model file (default: the corpus's generating model)")
    s.add_argument("--world", help="directory holding world.json (default: the corpus)")
    s.add_argument("--fits", help="directory of fitted params to evaluate instead of fitting")
    s.add_argument("--oracle", action="store_true", help="evaluate at the generating parameters")
    s.add_argument("--clips")
    s.add_argument("--out", required=True)
    s.add_argument("--u8", action="store_true")
    s.add_argument("--config")
    _add_weight_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference validation suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--samples", type=int, default=6)
    s.add_argument("--rtol", type=float, default=1e-4)
    s.add_argument("--min-rate", type=float, default=0.95)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("dt", help="distance transforms of a lip-label image")
    s.add_argument("--lips", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dt)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.dump_config:
            print(json.dumps(default_config(), indent=1, sort_keys=True))
            return EXIT_OK
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, optim.DivergenceError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (storage.DataError, optim.StageError, TemplateError, DimensionError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
