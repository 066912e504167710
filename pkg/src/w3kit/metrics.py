"""Logit-level fusion, clip averaging and Top-k verb / noun / action accuracy."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, MissingPredictionError, ShapeMismatchError
from .primitives import softmax

TASKS = ("verb", "noun")


@dataclass
class ClipPrediction:
    clip_id: str
    verb_logits: np.ndarray
    noun_logits: np.ndarray
    action_scores: Optional[list] = None  # [(verb, noun, score), ...]
    modality: str = "rgb"

    def __post_init__(self):
        self.verb_logits = np.asarray(self.verb_logits, dtype=float)
        self.noun_logits = np.asarray(self.noun_logits, dtype=float)
        if not (np.isfinite(self.verb_logits).all() and np.isfinite(self.noun_logits).all()):
            raise ConfigError(f"non-finite logits for clip {self.clip_id}")


@dataclass
class GroundTruth:
    clip_id: str
    verb: int
    noun: int
    video_id: str = ""
    start_time: float = 0.0


def ensemble_logits(predictions: Sequence[ClipPrediction], weights=None,
                    modality: str = "ensemble") -> ClipPrediction:
    """Weighted arithmetic mean of the logits of one clip across modalities.

    ``weights`` is a sequence aligned with ``predictions``, a mapping from modality tag
    to weight, or None for uniform. Weights are normalised first and the sum runs in
    ascending modality-tag order, so the result does not depend on input order.
    """
    if not predictions:
        raise ConfigError("cannot ensemble an empty list of predictions")
    ids = {p.clip_id for p in predictions}
    if len(ids) != 1:
        raise ConfigError(f"clip_id mismatch in ensemble: {sorted(ids)}")
    if weights is None:
        w = [1.0] * len(predictions)
    elif isinstance(weights, Mapping):
        w = [float(weights[p.modality]) for p in predictions]
    else:
        w = [float(x) for x in weights]
        if len(w) != len(predictions):
            raise ConfigError("one weight per prediction is required")
    if any(x < 0 for x in w) or sum(w) <= 0:
        raise ConfigError("ensemble weights must be non-negative and not all zero")
    shapes = {(p.verb_logits.shape, p.noun_logits.shape) for p in predictions}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"vocabulary sizes differ across modalities: {sorted(shapes)}")

    total = sum(w)
    order = sorted(range(len(predictions)), key=lambda i: (predictions[i].modality, i))
    verb = noun = None
    for i in order:
        wi = w[i] / total
        v, n = wi * predictions[i].verb_logits, wi * predictions[i].noun_logits
        verb = v if verb is None else verb + v
        noun = n if noun is None else noun + n
    return ClipPrediction(predictions[0].clip_id, verb, noun, None, modality)


def average_clips(clip_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over the clips sampled from one video segment."""
    if len(clip_logits) == 0:
        raise ConfigError("no clips to average")
    return np.mean(np.stack([np.asarray(c, dtype=float) for c in clip_logits]), axis=0)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def _by_id(predictions):
    if isinstance(predictions, Mapping):
        return predictions
    return {p.clip_id: p for p in predictions}


def _lookup(predictions, truths):
    preds = _by_id(predictions)
    missing = [t.clip_id for t in truths if t.clip_id not in preds]
    if missing:
        raise MissingPredictionError(missing)
    return preds


def topk_accuracy(predictions, truths: Sequence[GroundTruth], k: int, task: str) -> float:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    preds = _lookup(predictions, truths)
    if not truths:
        return 0.0
    hits = 0
    for t in truths:
        p = preds[t.clip_id]
        scores = p.verb_logits if task == "verb" else p.noun_logits
        label = t.verb if task == "verb" else t.noun
        hits += int(label in topk_indices(scores, k))
    return hits / len(truths)


def ranked_actions(pred: ClipPrediction, k: Optional[int] = None):
    """Pairs ranked by score, ties by (verb, noun) ascending.

    Uses ``action_scores`` when present, otherwise the outer product of the verb and
    noun softmaxes.
    """
    if pred.action_scores is not None:
        triples = sorted(((int(v), int(n), float(s)) for v, n, s in pred.action_scores),
                         key=lambda x: (-x[2], x[0], x[1]))
        return triples[:k] if k is not None else triples
    scores = softmax(pred.verb_logits)[:, None] * softmax(pred.noun_logits)[None, :]
    N = scores.shape[1]
    idx = topk_indices(scores.ravel(), scores.size if k is None else k)
    return [(int(j // N), int(j % N), float(scores.ravel()[j])) for j in idx]


def action_topk_accuracy(predictions, truths: Sequence[GroundTruth], k: int) -> float:
    """Fraction of clips whose true (verb, noun) pair is among the k best-ranked pairs."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    preds = _lookup(predictions, truths)
    if not truths:
        return 0.0
    hits = 0
    for t in truths:
        top = ranked_actions(preds[t.clip_id], k)
        hits += int(any(v == t.verb and n == t.noun for v, n, _ in top))
    return hits / len(truths)


def evaluate(predictions, truths, ks=(1, 5)) -> dict:
    """Percent accuracies ``{"verb": {"top1": ..}, "noun": .., "action": ..}``."""
    out = {}
    for task in TASKS:
        out[task] = {f"top{k}": 100.0 * topk_accuracy(predictions, truths, k, task) for k in ks}
    out["action"] = {f"top{k}": 100.0 * action_topk_accuracy(predictions, truths, k) for k in ks}
    return out


def format_report(results: Mapping[str, Mapping[str, dict]], splits: Sequence[str] = ("S1", "S2"),
                  ks=(1, 5)) -> str:
    """Plain-text table: one row per model, Verb/Noun/Action x Top-k x split columns.

    ``results`` maps a model name to ``{split: evaluate(...)}``; absent splits print "-".
    """
    cols = [(task, k, s) for task in ("verb", "noun", "action") for k in ks for s in splits]
    name_w = max([len("Model")] + [len(m) for m in results])
    group_w = len(ks) * len(splits) * 7 - 1
    lines = [" " * name_w + " | " + " | ".join(t.capitalize().center(group_w) for t in ("verb", "noun", "action"))]
    sub = " | ".join(" ".join(f"Top-{k}".center(len(splits) * 7 - 1) for k in ks) for _ in range(3))
    lines.append(" " * name_w + " | " + sub)
    head = " | ".join(" ".join(f"{s:>6}" for k in ks for s in splits) for _ in range(3))
    lines.append("Model".ljust(name_w) + " | " + head)
    lines.append("-" * len(lines[-1]))
    for model, by_split in results.items():
        cells = []
        for task in ("verb", "noun", "action"):
            vals = []
            for k in ks:
                for s in splits:
                    v = by_split.get(s, {}).get(task, {}).get(f"top{k}")
                    vals.append(f"{v:6.2f}" if v is not None else f"{'-':>6}")
            cells.append(" ".join(vals))
        lines.append(model.ljust(name_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def report_json(results) -> str:
    return json.dumps(results, indent=2, sort_keys=True) + "\n"
