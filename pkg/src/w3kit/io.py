"""On-disk formats: "w3kit-v1" checkpoints, prediction files and dataset directories.

All writers are deterministic: JSON keys are emitted in a fixed order and floats use
Python's shortest round-trip repr, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .data import SyntheticClip
from .errors import ConfigError, ShapeMismatchError
from .metrics import ClipPrediction, GroundTruth, ranked_actions

VERSION = "w3kit-v1"
TOP_ACTIONS = 100


def _dump(obj, path):
    text = json.dumps(obj, sort_keys=False, separators=(",", ":"), allow_nan=False)
    Path(path).write_text(text + "\n")


def _load(path):
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or obj.get("version") != VERSION:
        raise ConfigError(f"{path}: not a {VERSION} file")
    return obj


# --- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, state: dict, kind: str, meta: dict | None = None):
    """Write a state dict as ``{name: {"shape": [...], "dtype": ..., "values": [...]}}``."""
    params = {}
    for name, t in state.items():
        t = torch.as_tensor(t).detach().cpu()
        params[name] = {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "values": t.reshape(-1).tolist()}
    _dump({"version": VERSION, "kind": kind, "meta": meta or {}, "params": params}, path)


def load_checkpoint(path, kind: str | None = None):
    """Return ``(state_dict, meta)``; ``kind`` guards against loading the wrong model type."""
    obj = _load(path)
    if kind is not None and obj.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind!r} checkpoint, found {obj.get('kind')!r}")
    state = {}
    for name, entry in obj["params"].items():
        dtype = getattr(torch, entry["dtype"])
        state[name] = torch.tensor(entry["values"], dtype=dtype).reshape(entry["shape"])
    return state, obj.get("meta", {})


def save_module(path, module: torch.nn.Module, kind: str, meta: dict | None = None):
    save_checkpoint(path, module.state_dict(), kind, meta)


def load_into(module: torch.nn.Module, state: dict):
    own = module.state_dict()
    for name, t in state.items():
        if name in own and tuple(own[name].shape) != tuple(t.shape):
            raise ShapeMismatchError(f"parameter {name}: checkpoint shape {tuple(t.shape)} "
                                     f"!= model shape {tuple(own[name].shape)}",
                                     expected=tuple(own[name].shape), got=tuple(t.shape))
    module.load_state_dict(state)
    return module


def state_checksum(module: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- prediction files ---------------------------------------------------------------


def prediction_record(pred: ClipPrediction, top: int = TOP_ACTIONS):
    actions = ranked_actions(pred, top)
    return {"verb": [float(x) for x in pred.verb_logits],
            "noun": [float(x) for x in pred.noun_logits],
            "action": [[v, n, s] for v, n, s in actions]}


def write_predictions(path, predictions, task: str = "toy", top: int = TOP_ACTIONS):
    """``{"version", "task", "results": {clip_id: {"verb", "noun", "action"}}}`` sorted by clip id."""
    if task not in ("toy", "epic"):
        raise ConfigError(f"task must be 'toy' or 'epic', got {task!r}")
    preds = sorted(predictions, key=lambda p: p.clip_id)
    results = {p.clip_id: prediction_record(p, top) for p in preds}
    _dump({"version": VERSION, "task": task, "results": results}, path)


def read_predictions(path, modality: str | None = None):
    """Return ``(task, [ClipPrediction])``; the modality tag defaults to the file stem."""
    obj = _load(path)
    tag = modality or Path(path).stem
    preds = []
    for cid, rec in obj["results"].items():
        actions = [(int(v), int(n), float(s)) for v, n, s in rec.get("action", [])] or None
        preds.append(ClipPrediction(cid, rec["verb"], rec["noun"], actions, tag))
    return obj.get("task", "toy"), preds


# --- dataset directories ------------------------------------------------------------


def write_dataset(root, clips, info: dict):
    """Per-clip ``clips/<clip_id>.npy`` uint8 tensors plus ``manifest.json``."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clips:
        rel = f"clips/{c.clip_id}.npy"
        if c.frames.size:
            np.save(root / rel, np.ascontiguousarray(c.frames), allow_pickle=False)
        entries.append({"clip_id": c.clip_id, "verb": c.verb, "noun": c.noun, "video_id": c.video_id,
                        "position": c.position, "start_time": c.start_time,
                        "file": rel if c.frames.size else None, "meta": c.meta})
    manifest = {"version": VERSION, **info, "n_clips": len(entries), "clips": entries}
    _dump(manifest, root / "manifest.json")
    return manifest


def read_manifest(root):
    return _load(Path(root) / "manifest.json")


def read_dataset(root, load_frames: bool = True):
    root = Path(root)
    manifest = read_manifest(root)
    clips = []
    for e in manifest["clips"]:
        frames = np.zeros((0,), dtype=np.uint8)
        if load_frames and e.get("file"):
            frames = np.load(root / e["file"], allow_pickle=False)
        clips.append(SyntheticClip(e["clip_id"], frames, int(e["verb"]), int(e["noun"]), e["video_id"],
                                   int(e["position"]), float(e["start_time"]), e.get("meta", {})))
    return manifest, clips


def truths_from_clips(clips):
    return [GroundTruth(c.clip_id, c.verb, c.noun, c.video_id, c.start_time) for c in clips]


def is_nonempty_dir(path):
    p = Path(path)
    return p.exists() and (not p.is_dir() or any(os.scandir(p)))
