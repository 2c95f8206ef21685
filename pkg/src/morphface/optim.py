"""Adam optimization of clip parameters and model matrices.

Learning follows a three-stage curriculum: rigid pose from landmarks on the
mean mesh, identity on neutral images with zero expression, then everything
jointly.  Each stored clip keeps its own parameters (identity shared by its
frames) and its own Adam moments; one clip is visited per iteration.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .losses import LossWeights, NumericalError
from .model import MorphableModel, atomic_write_bytes, orthogonality_residual, orthogonalize_identity
from .objective import MODEL_BLOCKS, PARAM_BLOCKS, ClipParams, evaluate_clip

log = logging.getLogger(__name__)

STAGES = ("pose", "identity", "combined")
POSE_BLOCKS = ("rotation", "translation")


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam

def adam_update(x, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, shared=False):
    """One bias-corrected Adam step; returns (x, m, v).  ``t`` is the 1-based step.

    ``shared`` keeps a single second moment for the whole block (its mean
    square gradient), so entries move in proportion to their gradient.
    """
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * (np.mean(g * g) if shared else g * g)
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return x - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    """Adam moments for many named blocks, each with its own step count."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}
        self.rejected = []

    def step(self, key, x, g, lr, shared=False):
        """Updated copy of ``x``, or ``x`` itself when ``g`` is not finite."""
        if not np.all(np.isfinite(g)):
            self.rejected.append(key)
            log.warning("rejected Adam step for %s: non-finite gradient", key)
            return x
        if key not in self.m:
            self.m[key] = np.zeros_like(x)
            self.v[key] = np.zeros(() if shared else x.shape)
            self.t[key] = 0
        self.t[key] += 1
        x, self.m[key], self.v[key] = adam_update(x, g, self.m[key], self.v[key], self.t[key], lr,
                                                  self.beta1, self.beta2, self.eps, shared)
        return x

    def reset(self, prefix):
        for d in (self.m, self.v, self.t):
            for k in [k for k in d if k[:len(prefix)] == prefix]:
                del d[k]


# ---------------------------------------------------------------------------
# configuration

DEFAULT_LR = {
    "alpha": 0.02, "beta": 0.02, "delta": 0.02, "gamma": 0.01,
    "rotation": 2e-3, "translation": 0.5,
    "M_gid": 5e-4, "M_gexp": 5e-4, "M_R": 5e-5,
}


@dataclass
class StageConfig:
    iterations: int
    blocks: tuple
    terms: tuple
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    clip_steps: int = 5          # parameter-only iterations on a clip before each model step
    clip_solver: str = "lbfgs"   # "lbfgs" (warm-started inner solve) or "adam"
    lr_final: float = 0.01       # lr multiplier reached at the end of the stage
    shared_moments: bool = False  # one second moment per model matrix instead of per entry

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        self.blocks = tuple(self.blocks)
        self.terms = tuple(self.terms)

    def lr_at(self, block, it):
        frac = it / max(1, self.iterations - 1)
        return self.lr[block] * self.lr_final ** frac


def _stage_defaults():
    return {
        "pose": StageConfig(iterations=150, blocks=POSE_BLOCKS, terms=("land_mean",), clip_steps=0,
                            lr={**DEFAULT_LR, "rotation": 0.02, "translation": 2.0}),
        "identity": StageConfig(iterations=3000, blocks=("alpha", "beta", "gamma", "rotation", "translation",
                                                         "M_gid", "M_R"),
                                terms=("land", "land_mean", "seg", "pho", "per", "smo")),
        "combined": StageConfig(iterations=6000, blocks=PARAM_BLOCKS + MODEL_BLOCKS,
                                terms=("land", "land_mean", "seg", "pho", "per", "smo", "dis")),
    }


@dataclass
class CurriculumConfig:
    stages: dict = field(default_factory=_stage_defaults)
    mix: tuple = (1, 3)          # neutral : multi-frame sampling ratio in the combined stage
    dims: tuple = (8, 6, 8)
    weights: LossWeights = field(default_factory=lambda: LossWeights(tau=4.0, land_mean=0.1, smo=1e-4))
    init_scale: float = 1e-6     # std of the initial bases relative to the template diagonal
    seed: int = 0
    log_every: int = 10
    divergence_window: int = 50
    divergence_factor: float = 10.0

    def __post_init__(self):
        if len(self.mix) != 2 or min(self.mix) <= 0:
            raise ValueError("mixing ratio components must be positive")
        for name, st in list(self.stages.items()):
            if name not in STAGES:
                raise ValueError(f"unknown stage {name!r}")
            if isinstance(st, dict):
                self.stages[name] = StageConfig(**st)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.dims = tuple(self.dims)
        self.mix = tuple(self.mix)

    def to_dict(self):
        return {"stages": {k: asdict(v) for k, v in self.stages.items()}, "mix": list(self.mix),
                "dims": list(self.dims), "weights": self.weights.to_dict(), "init_scale": self.init_scale,
                "seed": self.seed,
                "log_every": self.log_every, "divergence_window": self.divergence_window,
                "divergence_factor": self.divergence_factor}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        stages = _stage_defaults()
        for k, v in d.pop("stages", {}).items():
            if k not in stages:
                raise ValueError(f"unknown stage {k!r}")
            base = asdict(stages[k])
            base.update(v)
            stages[k] = StageConfig(**base)
        return cls(stages=stages, **d)


# ---------------------------------------------------------------------------
# training state

@dataclass
class TrainState:
    model: MorphableModel
    params: list                 # ClipParams per corpus clip
    adam: Adam = field(default_factory=Adam)
    stage: str = "pose"
    iteration: int = 0
    seed: int = 0
    trace: list = field(default_factory=list)
    completed: list = field(default_factory=list)

    def advance(self, stage):
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        done = [STAGES.index(s) for s in self.completed]
        if done and STAGES.index(stage) < max(done):
            raise StageError(f"stage {stage!r} cannot follow {self.completed[-1]!r}")
        self.stage = stage

    def to_bytes(self):
        arrays = {f"model/{k}": v for k, v in self.model.arrays().items()}
        for c, p in enumerate(self.params):
            for k, v in p.blocks().items():
                arrays[f"params/{c}/{k}"] = v
        keys = []
        for j, key in enumerate(self.adam.m):
            arrays[f"adam/{j}/m"] = self.adam.m[key]
            arrays[f"adam/{j}/v"] = self.adam.v[key]
            keys.append([list(key), self.adam.t[key]])
        meta = {"stage": self.stage, "iteration": self.iteration, "seed": self.seed,
                "n_clips": len(self.params), "adam_keys": keys, "completed": self.completed,
                "adam_hyper": [self.adam.beta1, self.adam.beta2, self.adam.eps], "trace": self.trace}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        z = np.load(io.BytesIO(data))
        meta = json.loads(z["__meta__"].tobytes().decode())
        model = MorphableModel(z["model/M_gid"], z["model/M_gexp"], z["model/M_R"])
        params = [ClipParams(**{k: z[f"params/{c}/{k}"] for k in PARAM_BLOCKS}) for c in range(meta["n_clips"])]
        adam = Adam(*meta["adam_hyper"])
        for j, (key, t) in enumerate(meta["adam_keys"]):
            key = tuple(key)
            adam.m[key], adam.v[key], adam.t[key] = z[f"adam/{j}/m"], z[f"adam/{j}/v"], t
        return cls(model, params, adam, meta["stage"], meta["iteration"], meta["seed"],
                   meta["trace"], meta["completed"])

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def initial_state(model, corpus, seed=0):
    return TrainState(model=model.copy(), params=[ClipParams.initial(model.dims, len(c.observations))
                                                  for c in corpus], seed=seed)


# ---------------------------------------------------------------------------
# stage loop

def _apply_params(state, c, grads, blocks, lrs):
    p = state.params[c]
    for b in blocks:
        if b in PARAM_BLOCKS:
            setattr(p, b, state.adam.step(("clip", c, b), getattr(p, b), grads[b], lrs[b]))


def _apply_model(state, grads, blocks, lrs, shared=False):
    for b in blocks:
        if b in MODEL_BLOCKS:
            setattr(state.model, b, state.adam.step(("model", b), getattr(state.model, b), grads[b], lrs[b], shared))


class _DivergenceMonitor:
    def __init__(self, window, factor):
        self.window, self.factor = window, factor
        self.buf = []
        self.best = np.inf

    def push(self, value):
        self.buf.append(value)
        if len(self.buf) < self.window:
            return False
        mean = float(np.mean(self.buf[-self.window:]))
        self.best = min(self.best, mean)
        return mean > self.factor * self.best


def run_stage(state, rig, corpus, config, stage, clip_ids=None, sampler=None):
    """Run one curriculum stage in place; returns ``state``.

    Only the stage's enabled blocks are touched.  In the identity stage
    expression coefficients are held at zero; in the combined stage the
    identity basis is re-orthogonalized after every model update.
    """
    sc = config.stages[stage]
    state.advance(stage)
    rng = np.random.default_rng([config.seed, STAGES.index(stage)])
    ids = list(range(len(corpus))) if clip_ids is None else list(clip_ids)
    if not ids:
        raise StageError(f"stage {stage!r} has no clips")
    weights = config.weights
    if stage == "pose":
        weights = replace(weights, land_mean=max(weights.land_mean, 1.0))
    blocks = sc.blocks
    if stage == "identity":
        blocks = tuple(b for b in blocks if b not in ("delta", "M_gexp"))
        for c in ids:
            state.params[c].delta[:] = 0.0
    model_blocks = tuple(b for b in blocks if b in MODEL_BLOCKS)
    param_blocks = tuple(b for b in blocks if b in PARAM_BLOCKS)
    orth = stage == "combined"
    if orth and model_blocks:
        state.model = orthogonalize_identity(state.model, rig.graph)
    monitor = _DivergenceMonitor(config.divergence_window, config.divergence_factor)
    for it in range(sc.iterations):
        c = ids[it % len(ids)] if sampler is None else sampler(rng)
        obs = corpus[c].observations
        lrs = {b: sc.lr_at(b, it) for b in blocks}
        inner = sc.clip_steps if model_blocks else 0
        try:
            if inner and sc.clip_solver == "lbfgs":
                track, _ = _lbfgs_phase(rig, state.model, obs, state.params[c], param_blocks, sc.terms,
                                        weights, inner, _INNER)
                state.params[c] = track.best
            else:
                for _ in range(inner):
                    rep = evaluate_clip(rig, state.model, state.params[c], obs, weights, sc.terms)
                    _apply_params(state, c, rep.grads, param_blocks, lrs)
            rep = evaluate_clip(rig, state.model, state.params[c], obs, weights, sc.terms)
        except NumericalError as e:
            raise DivergenceError(str(e), state.trace) from e
        if not (inner and sc.clip_solver == "lbfgs"):
            _apply_params(state, c, rep.grads, param_blocks, lrs)
        _apply_model(state, rep.grads, model_blocks, lrs, sc.shared_moments)
        if orth and model_blocks:
            state.model = orthogonalize_identity(state.model, rig.graph)
        state.iteration += 1
        if it % config.log_every == 0 or it == sc.iterations - 1:
            entry = {"stage": stage, "iteration": state.iteration, "clip": int(c), "loss": rep.value,
                     "terms": {k: float(v) for k, v in rep.terms.items()}}
            if orth:
                r, s = orthogonality_residual(state.model, rig.graph)
                entry["orthogonality"] = r / s
            state.trace.append(entry)
        if monitor.push(rep.value):
            raise DivergenceError(f"loss diverged in stage {stage!r} at iteration {it}", state.trace)
    state.completed.append(stage)
    return state


@dataclass
class _InnerSolve:
    tol: float = 1e-10
    restarts: int = 0


_INNER = _InnerSolve()


def _groups(corpus):
    neutral = [k for k, c in enumerate(corpus) if c.neutral]
    multi = [k for k, c in enumerate(corpus) if not c.neutral]
    return neutral, multi


def run_stage_pose(state, rig, corpus, config):
    return run_stage(state, rig, corpus, replace_iterations(config, "pose", len(corpus)), "pose")


def replace_iterations(config, stage, n_clips):
    """Pose-stage iterations count per clip; expand to a full sweep."""
    sc = config.stages[stage]
    stages = dict(config.stages)
    stages[stage] = replace(sc, iterations=sc.iterations * n_clips)
    return replace(config, stages=stages)


def run_stage_identity(state, rig, corpus, config):
    neutral, _ = _groups(corpus)
    if not neutral:
        raise StageError("identity stage needs neutral clips")
    order = np.random.default_rng([config.seed, 1]).permutation(neutral)
    return run_stage(state, rig, corpus, config, "identity", clip_ids=order)


def run_stage_combined(state, rig, corpus, config):
    neutral, multi = _groups(corpus)
    a, b = config.mix
    if not neutral or not multi:
        pool = neutral or multi

        def sampler(rng):
            return pool[rng.integers(len(pool))]
    else:
        def sampler(rng):
            grp = neutral if rng.random() < a / (a + b) else multi
            return grp[rng.integers(len(grp))]
    return run_stage(state, rig, corpus, config, "combined", sampler=sampler)


def learn(state, rig, corpus, config, stages=STAGES, checkpoint=None):
    """Run the requested stages in curriculum order; optionally checkpoint after each."""
    runners = {"pose": run_stage_pose, "identity": run_stage_identity, "combined": run_stage_combined}
    for st in STAGES:
        if st in stages:
            runners[st](state, rig, corpus, config)
            if checkpoint:
                state.save(checkpoint)
    return state


# ---------------------------------------------------------------------------
# fitting with a frozen model

# Adam rates for coefficients are per unit of basis-column RMS (mm for geometry)
FIT_LR = {"alpha": 0.1, "beta": 0.003, "delta": 0.1, "gamma": 0.01, "rotation": 2e-3, "translation": 0.5}

# unit of each L-BFGS variable; coefficient units are divided by their column RMS
LBFGS_UNITS = {"alpha": 1.0, "delta": 1.0, "beta": 0.01, "gamma": 0.1, "rotation": 0.01, "translation": 1.0}


def coefficient_scales(rig, model):
    """RMS magnitude of every basis column (mesh space for geometry)."""
    def rms(B):
        return np.sqrt(np.mean(B ** 2, axis=0)) if B.size else np.zeros(B.shape[1])
    return {"alpha": rms(rig.graph.upsample_basis(model.M_gid)),
            "delta": rms(rig.graph.upsample_basis(model.M_gexp)),
            "beta": rms(model.M_R)}


def _per_column(rig, model, base):
    out = dict(base)
    for b, s in coefficient_scales(rig, model).items():
        out[b] = base[b] / np.maximum(s, 1e-12)
    return out


def _default_phases():
    return [
        {"blocks": ["rotation", "translation"], "terms": ["land_mean"], "iterations": 150,
         "static_landmarks": True},
        {"blocks": ["rotation", "translation", "alpha", "delta"], "terms": ["land"], "iterations": 300,
         "static_landmarks": True},
        {"blocks": ["rotation", "translation", "alpha", "delta"], "terms": ["land"], "iterations": 100},
        {"blocks": ["gamma", "beta"], "terms": ["pho"], "iterations": 150},
        {"blocks": list(PARAM_BLOCKS), "terms": None, "iterations": 800},
    ]


@dataclass
class FitConfig:
    """Phased fit: each phase optimizes some blocks under some terms (None = all ``terms``).

    A phase with ``static_landmarks`` ignores the silhouette landmarks, whose
    vertex assignment switches with pose and makes early phases stall.
    """
    phases: list = field(default_factory=_default_phases)
    weights: LossWeights = field(default_factory=lambda: LossWeights(tau=4.0, smo=0.0))
    terms: tuple = ("land", "seg", "pho", "per", "smo", "dis")
    method: str = "lbfgs"        # "lbfgs" or "adam"
    lr: dict = field(default_factory=lambda: dict(FIT_LR))
    lr_final: float = 0.05
    tol: float = 1e-10
    restarts: int = 4

    def __post_init__(self):
        if self.method not in ("lbfgs", "adam"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.terms = tuple(self.terms)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["terms"] = list(self.terms)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FitResult:
    params: ClipParams
    loss: float
    converged: bool
    trace: list


class _Tracker:
    def __init__(self, p):
        self.best, self.best_loss, self.trace = p.copy(), np.inf, []

    def see(self, p, value):
        self.trace.append(value)
        if value < self.best_loss:
            self.best, self.best_loss = p.copy(), value


def _phase_weights(weights, terms):
    w = weights
    if "land_mean" in terms and w.land_mean == 0:
        w = replace(w, land_mean=1.0)
    if "land" in terms and w.land == 0:
        w = replace(w, land=1.0)
    return w


def _adam_phase(rig, model, obs, p, blocks, terms, weights, iters, config):
    rates = _per_column(rig, model, config.lr)
    adam = Adam()
    track = _Tracker(p)
    for it in range(iters):
        rep = evaluate_clip(rig, model, p, obs, weights, terms)
        track.see(p, rep.value)
        frac = it / max(1, iters - 1)
        for b in blocks:
            setattr(p, b, adam.step(b, getattr(p, b), rep.grads[b], rates[b] * config.lr_final ** frac))
    rep = evaluate_clip(rig, model, p, obs, weights, terms, grad=False)
    track.see(p, rep.value)
    return track, False


def _lbfgs_phase(rig, model, obs, p0, blocks, terms, weights, iters, config):
    from scipy.optimize import minimize

    units = _per_column(rig, model, LBFGS_UNITS)
    shapes = {b: getattr(p0, b).shape for b in blocks}
    unit = {b: np.broadcast_to(units[b], shapes[b]).ravel() for b in blocks}
    cuts = np.cumsum([int(np.prod(shapes[b])) for b in blocks])[:-1]
    track = _Tracker(p0)

    def unpack(x):
        p = p0.copy()
        for b, v in zip(blocks, np.split(x, cuts)):
            setattr(p, b, (v * unit[b]).reshape(shapes[b]))
        return p

    def pack(p):
        return np.concatenate([getattr(p, b).ravel() / unit[b] for b in blocks])

    def fun(x):
        p = unpack(x)
        rep = evaluate_clip(rig, model, p, obs, weights, terms)
        track.see(p, rep.value)
        return rep.value, np.concatenate([rep.grads[b].ravel() * unit[b] for b in blocks])

    x0 = pack(p0)
    success = False
    for _ in range(config.restarts + 1):
        res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                       options={"maxiter": iters, "maxfun": 2 * iters, "ftol": config.tol, "gtol": 1e-12})
        log.debug("lbfgs: %s after %d evaluations", res.message, res.nfev)
        if res.success:
            success = True
            break
        x1 = pack(track.best)
        if np.array_equal(x1, x0):
            break
        x0 = x1
    return track, success


def _without_landmarks(obs, n):
    o = replace(obs)
    o.landmark_valid = obs.landmark_valid.copy()
    o.landmark_valid[:n] = False
    return o


def fit_clip(rig, model, observations, config=None, init=None):
    """Minimize the objective over one clip's parameters with the model frozen.

    Runs the configured phases in order (by default: pose from mean-mesh
    landmarks, shape from landmarks, appearance from pixels, then all terms on
    all blocks).  Each phase starts from the best parameters of the previous
    one.  ``converged`` reports whether the final phase met its tolerance.
    """
    config = config or FitConfig()
    p = init.copy() if init is not None else ClipParams.initial(model.dims, len(observations))
    run = _lbfgs_phase if config.method == "lbfgs" else _adam_phase
    trace, ok = [], False
    n_dyn = len(rig.template.contour_candidates)
    static = [_without_landmarks(o, n_dyn) for o in observations]
    for ph in config.phases:
        terms = tuple(ph["terms"]) if ph.get("terms") else config.terms
        blocks = tuple(ph["blocks"])
        obs = static if ph.get("static_landmarks") else observations
        track, ok = run(rig, model, obs, p, blocks, terms,
                        _phase_weights(config.weights, terms), ph["iterations"], config)
        p = track.best
        trace += track.trace
    final = evaluate_clip(rig, model, p, observations, config.weights, config.terms, grad=False).value
    return FitResult(p, float(final), ok, trace)
