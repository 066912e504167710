"""Toy-scale experiments: attention comparison and temporal-context comparison.

``run_experiment`` trains the no-attention / W2 / W3 backbones on identical planted data
with identical seeds and schedules, then compares three action scorers (independent
outer product, action prior, CtxtNet) on Markov action sequences. Everything is a pure
function of the configuration under single-thread execution.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig, ToyBackbone
from .ctxtnet import (CtxtNet, CtxtTrainConfig, VocabConfig, action_prior_baseline, estimate_action_prior,
                      outer_product_scores, rank_actions, score_windows, train_ctxtnet, windows_from_videos)
from .data import MarkovActionScript, ToyVocab, generate_context_sequences, generate_planted_dataset
from .errors import ConfigError
from .io import truths_from_clips
from .metrics import ClipPrediction, GroundTruth, ensemble_logits, evaluate, format_report
from .train import TrainConfig, predict_logits, train_backbone

log = logging.getLogger(__name__)

# (signal strength, noise std) of the simulated per-modality logits
MODALITY_PROFILES = {"rgb": (2.0, 1.0), "flow": (1.6, 1.0), "audio": (0.8, 1.0)}


@dataclass
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    data_seed: int = 1
    s1_seed: int = 1001
    s2_seed: int = 2001
    n_train: int = 2000
    n_test: int = 400
    n_distractors: int = 6
    jitter: int = 1
    noise: float = 0.08
    variants: tuple = ("none", "w2", "w3")
    widths: tuple = (8, 16, 16)
    reduction: int = 4
    temporal_kernel: int = 3
    epochs: int = 12
    lr: float = 0.02
    schedule: str = "cosine"
    batch_size: int = 16
    # temporal-context comparison
    context: bool = True
    p_close: float = 0.8
    clips_per_video: int = 10
    n_train_videos: int = 400
    n_test_videos: int = 100
    T_ctx: int = 5
    R: int = 4
    ctxt_epochs: int = 30
    ctxt_lr: float = 1e-3
    ctxt_hidden: tuple = (64, 64)
    modality_profiles: dict = field(default_factory=lambda: dict(MODALITY_PROFILES))

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        self.variants = tuple(self.variants)
        self.widths = tuple(self.widths)
        self.ctxt_hidden = tuple(self.ctxt_hidden)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 0 or self.ctxt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")


def backbone_predictions(model, clips, modality="rgb"):
    verb, noun = predict_logits(model, clips)
    return [ClipPrediction(c.clip_id, v, n, None, modality) for c, v, n in zip(clips, verb, noun)]


def _median(values):
    return float(np.median(np.asarray(values, dtype=float)))


def run_backbone_comparison(config: ExperimentConfig):
    """Train every variant for every seed; returns ``{variant: {seed: {split: metrics}}}`` and predictions."""
    render = {"n_distractors": config.n_distractors, "jitter": config.jitter, "noise": config.noise}
    train = generate_planted_dataset(config.data_seed, config.n_train, prefix="train", **render)
    splits = {"S1": generate_planted_dataset(config.s1_seed, config.n_test, prefix="s1_", **render),
              "S2": generate_planted_dataset(config.s2_seed, config.n_test, prefix="s2_", **render)}
    truths = {s: truths_from_clips(c) for s, c in splits.items()}
    results, predictions, histories = {}, {}, {}
    for variant in config.variants:
        results[variant], predictions[variant], histories[variant] = {}, {}, {}
        for seed in config.seeds:
            torch.manual_seed(seed)
            bcfg = BackboneConfig(widths=config.widths, attention=variant, reduction=config.reduction,
                                  temporal_kernel=config.temporal_kernel)
            model = ToyBackbone(bcfg, seed=seed)
            start = time.perf_counter()
            res = train_backbone(train, model, TrainConfig(epochs=config.epochs, lr=config.lr,
                                                           batch_size=config.batch_size, seed=seed,
                                                           schedule=config.schedule))
            log.info("%s seed %d trained in %.1fs", variant, seed, time.perf_counter() - start)
            histories[variant][seed] = res.history
            results[variant][seed] = {}
            predictions[variant][seed] = {}
            for split, clips in splits.items():
                preds = backbone_predictions(model, clips)
                predictions[variant][seed][split] = preds
                results[variant][seed][split] = evaluate(preds, truths[split])
    return results, predictions, histories


def simulate_modality_logits(rng, labels, V, N, profiles=MODALITY_PROFILES):
    """Independent noisy views of the labels, one per modality, ensembled with equal weights.

    Each modality emits ``beta * onehot(label) + sigma * noise`` for verbs and nouns.
    Returns ``(verb_logits (M, V), noun_logits (M, N))``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
    M = len(labels)
    verb, noun = np.zeros((M, V)), np.zeros((M, N))
    views = []
    for tag in sorted(profiles):
        beta, sigma = profiles[tag]
        v = sigma * rng.normal(size=(M, V))
        n = sigma * rng.normal(size=(M, N))
        v[np.arange(M), labels[:, 0]] += beta
        n[np.arange(M), labels[:, 1]] += beta
        views.append((tag, v, n))
    for i in range(M):
        ens = ensemble_logits([ClipPrediction("c", v[i], n[i], None, tag) for tag, v, n in views])
        verb[i], noun[i] = ens.verb_logits, ens.noun_logits
    return verb, noun


def _context_split(seed, script, n_videos, config, split_tag):
    videos = generate_context_sequences(seed, script, n_videos, prefix=f"{split_tag}vid")
    clips = [c for vid in videos for c in vid]
    labels = np.array([(c.verb, c.noun) for c in clips], dtype=np.int64)
    rng = np.random.default_rng([seed, 5])
    verb, noun = simulate_modality_logits(rng, labels, script.V, script.N, config.modality_profiles)
    seqs, k = [], 0
    for vid in videos:
        seqs.append([(verb[k + j], noun[k + j], c.start_time) for j, c in enumerate(vid)])
        k += len(vid)
    vw, nw = windows_from_videos(seqs, config.T_ctx)
    return clips, labels, verb, noun, vw, nw


def _predictions_from_scores(clips, verb, noun, scores, modality):
    return [ClipPrediction(c.clip_id, verb[i], noun[i], rank_actions(scores[i]), modality)
            for i, c in enumerate(clips)]


def run_context_comparison(config: ExperimentConfig, V=8, N=12):
    """Outer product vs action prior vs CtxtNet on open/close Markov sequences, per seed."""
    script = MarkovActionScript.open_close(V, N, config.p_close, config.clips_per_video)
    vocab = VocabConfig(V, N, config.R, config.T_ctx)
    results = {"outer": {}, "prior": {}, "ctxtnet": {}}
    for seed in config.seeds:
        _, tr_labels, _, _, tr_vw, tr_nw = _context_split(10_000 + seed, script, config.n_train_videos,
                                                          config, "ctr")
        clips, labels, verb, noun, vw, nw = _context_split(20_000 + seed, script, config.n_test_videos,
                                                           config, "cte")
        truths = [GroundTruth(c.clip_id, c.verb, c.noun, c.video_id, c.start_time) for c in clips]
        prior = estimate_action_prior(tr_labels, V, N)
        torch.manual_seed(seed)
        model = CtxtNet(vocab, hidden=config.ctxt_hidden, seed=seed)
        train_ctxtnet(tr_vw, tr_nw, tr_labels, model,
                      CtxtTrainConfig(epochs=config.ctxt_epochs, lr=config.ctxt_lr, seed=seed))
        scorers = {"outer": outer_product_scores(verb, noun),
                   "prior": action_prior_baseline(verb, noun, prior),
                   "ctxtnet": score_windows(model, vw, nw)}
        for name, scores in scorers.items():
            preds = _predictions_from_scores(clips, verb, noun, scores, name)
            results[name][seed] = {"S1": evaluate(preds, truths)}
    return results


def _median_table(per_seed):
    """Median over seeds of every metric, ``{split: {task: {topk: value}}}``."""
    seeds = sorted(per_seed)
    first = per_seed[seeds[0]]
    return {split: {task: {k: _median([per_seed[s][split][task][k] for s in seeds]) for k in first[split][task]}
                    for task in first[split]} for split in first}


def run_experiment(config: ExperimentConfig = ExperimentConfig()) -> dict:
    """Run both comparisons and return the JSON-ready report (plus its text form under ``"text"``)."""
    backbone, _, histories = run_backbone_comparison(config)
    report = {"config": asdict(config),
              "backbone": {v: {str(s): r for s, r in per.items()} for v, per in backbone.items()},
              "backbone_median": {v: _median_table(per) for v, per in backbone.items()},
              "histories": {v: {str(s): h for s, h in per.items()} for v, per in histories.items()}}
    names = {"none": "Baseline (shift)", "w2": "+W2", "w3": "+W3"}
    text = ["Backbone comparison (median over seeds %s)" % (list(config.seeds),),
            format_report({names.get(v, v): t for v, t in report["backbone_median"].items()})]
    if config.context:
        context = run_context_comparison(config)
        report["context"] = {m: {str(s): r for s, r in per.items()} for m, per in context.items()}
        report["context_median"] = {m: _median_table(per) for m, per in context.items()}
        cnames = {"outer": "Outer product", "prior": "Action prior", "ctxtnet": "CtxtNet"}
        text += ["Action scorer comparison on open/close sequences (p=%.2f)" % config.p_close,
                 format_report({cnames[m]: t for m, t in report["context_median"].items()}, splits=("S1",))]
    report["text"] = "\n".join(text)
    return report


def write_report(report: dict, json_path: Optional[str] = None, text_path: Optional[str] = None):
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if text_path:
        with open(text_path, "w") as fh:
            fh.write(report["text"])
