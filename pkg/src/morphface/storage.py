"""On-disk layout for corpora, observations, worlds and run manifests.

A corpus directory holds::

    template.obj, template.json     mesh and its semantic sidecar
    corpus.json                     camera, clip names, seeds
    world.json, world_model.bin     generating world (synthetic corpora only)
    clips/<name>/clip.json          is_neutral flags, camera, frame count
    clips/<name>/frame_k.png        8-bit image
    clips/<name>/frame_k.npy        float image (exact-closure tests)
    clips/<name>/frame_k.landmarks.txt   66 lines "x y valid"
    clips/<name>/frame_k.lips.png   palette labels 0 / 1 (upper) / 2 (lower)
    clips/<name>/params.json        generating parameters (synthetic only)
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .model import atomic_write_bytes, build_upsampling, load_model, save_model
from .objective import ClipParams, FrameObservation, Rig
from .scene import Camera
from .synth import Clip, GroundTruthWorld, SamplingConfig
from .template import load_template, save_template

LIP_PALETTE = [0, 0, 0, 220, 40, 40, 40, 80, 220] + [0] * (256 * 3 - 9)


class DataError(ValueError):
    """Missing or malformed input files."""


def _json(path, obj):
    atomic_write_bytes(path, json.dumps(obj, indent=1, sort_keys=True).encode())


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing file {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path}: {e}") from e


# --- frames ------------------------------------------------------------------------

def write_png(path, img):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8) if img.dtype != np.uint8 else img
    Image.fromarray(arr).save(path)


def write_labels(path, labels):
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(LIP_PALETTE)
    im.save(path)


def read_labels(path):
    im = Image.open(path)
    if im.mode != "P":
        im = im.convert("L")
    lab = np.asarray(im, dtype=np.int64)
    if not set(np.unique(lab)) <= {0, 1, 2}:
        raise DataError(f"{path}: lip labels must be 0, 1 or 2")
    return lab


def write_landmarks(path, landmarks, valid):
    lines = [f"{x:.6f} {y:.6f} {int(v)}" for (x, y), v in zip(landmarks, valid)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path):
    try:
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    except FileNotFoundError as e:
        raise DataError(f"missing file {path}") from e
    if len(rows) != 66 or any(len(r) != 3 for r in rows):
        raise DataError(f"{path}: expected 66 lines of 'x y valid'")
    arr = np.array(rows, dtype=float)
    return arr[:, :2], arr[:, 2] > 0


def write_clip(directory, observations, camera, params=None, images_u8=None, name=""):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, o in enumerate(observations):
        write_png(d / f"frame_{k}.png", images_u8[k] if images_u8 is not None else o.image)
        np.save(d / f"frame_{k}.npy", o.image)
        write_landmarks(d / f"frame_{k}.landmarks.txt", o.landmarks, o.landmark_valid)
        write_labels(d / f"frame_{k}.lips.png", o.lip_labels)
    _json(d / "clip.json", {"name": name, "n_frames": len(observations),
                            "is_neutral": [bool(o.is_neutral) for o in observations],
                            "camera": camera.to_dict()})
    if params is not None:
        params.save(d / "params.json")


def read_clip(directory, float_images=True, neutral_flags=True):
    """Observations of one clip directory; returns (observations, meta, params or None).

    ``float_images`` prefers ``frame_k.npy`` over the 8-bit PNG when present.
    ``neutral_flags=False`` hides the neutral flags (for evaluation fits).
    """
    d = Path(directory)
    meta = read_json(d / "clip.json")
    obs = []
    for k in range(int(meta["n_frames"])):
        npy = d / f"frame_{k}.npy"
        if float_images and npy.exists():
            img = np.load(npy)
        else:
            try:
                img = np.asarray(Image.open(d / f"frame_{k}.png").convert("RGB"), dtype=float) / 255.0
            except FileNotFoundError as e:
                raise DataError(f"missing file {d / f'frame_{k}.png'}") from e
        lm, valid = read_landmarks(d / f"frame_{k}.landmarks.txt")
        try:
            labels = read_labels(d / f"frame_{k}.lips.png")
        except FileNotFoundError as e:
            raise DataError(f"missing file {d / f'frame_{k}.lips.png'}") from e
        if labels.shape != img.shape[:2]:
            raise DataError(f"{d}: lip labels and image sizes differ")
        neutral = bool(meta["is_neutral"][k]) if neutral_flags else False
        obs.append(FrameObservation(img, lm, valid, labels, is_neutral=neutral))
    params = ClipParams.load(d / "params.json") if (d / "params.json").exists() else None
    return obs, meta, params


# --- corpora --------------------------------------------------------------------------

def write_world(directory, world):
    d = Path(directory)
    save_model(world.model, d / "world_model.bin")
    _json(d / "world.json", {"id_std": world.id_std.tolist(), "exp_std": world.exp_std.tolist(),
                             "ref_std": world.ref_std.tolist(), "config": world.config.to_dict(),
                             "seed": world.seed, "model_digest": world.model.digest()})


def read_world(directory, rig):
    d = Path(directory)
    meta = read_json(d / "world.json")
    model = load_model(d / "world_model.bin")
    return GroundTruthWorld(rig, model, np.array(meta["id_std"]), np.array(meta["exp_std"]),
                            np.array(meta["ref_std"]), SamplingConfig(**meta["config"]), meta["seed"])


def write_corpus(directory, rig, clips, info=None, world=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_template(rig.template, d / "template.obj")
    for c in clips:
        write_clip(d / "clips" / c.name, c.observations, rig.camera, c.params, c.images_u8, c.name)
    if world is not None:
        write_world(d, world)
    _json(d / "corpus.json", {"camera": rig.camera.to_dict(), "clips": [c.name for c in clips],
                              "neutral": [bool(c.neutral) for c in clips], **(info or {})})


def load_rig(directory):
    d = Path(directory)
    meta = read_json(d / "corpus.json")
    if not (d / "template.obj").exists():
        raise DataError(f"missing file {d / 'template.obj'}")
    tpl = load_template(d / "template.obj")
    return Rig(tpl, build_upsampling(tpl), Camera.from_dict(meta["camera"]))


def read_corpus(directory, float_images=True, neutral_flags=True, names=None):
    """(rig, clips, meta) of a corpus directory; clips carry generating params when stored."""
    d = Path(directory)
    meta = read_json(d / "corpus.json")
    rig = load_rig(d)
    clips = []
    for name, neutral in zip(meta["clips"], meta["neutral"]):
        if names is not None and name not in names:
            continue
        obs, cmeta, params = read_clip(d / "clips" / name, float_images, neutral_flags)
        clips.append(Clip(params, obs, [], bool(neutral), name))
    return rig, clips, meta


# --- manifests ---------------------------------------------------------------------------

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, command, argv, config, inputs=(), outputs=(), extra=None):
    """Record what ran: command, arguments, full config, input/output digests, environment."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command, "argv": list(argv), "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): file_digest(p) for p in outputs if Path(p).is_file()},
        "version": __version__, "python": sys.version.split()[0], "numpy": np.__version__,
        "platform": platform.platform(), "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "pid": os.getpid(),
    }
    man.update(extra or {})
    _json(d / "manifest.json", man)
    return man
