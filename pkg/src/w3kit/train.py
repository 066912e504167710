"""First-stage training of the toy backbone (SGD) and prediction dumps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0
    schedule: str = "constant"  # constant | cosine (per-step decay to zero)

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)


def clips_to_tensors(clips):
    x = torch.from_numpy(np.stack([c.frames for c in clips]).astype(np.float32) / 255.0)
    verbs = torch.tensor([c.verb for c in clips], dtype=torch.long)
    nouns = torch.tensor([c.noun for c in clips], dtype=torch.long)
    return x, verbs, nouns


def make_optimizer(params, config: TrainConfig):
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def train_backbone(clips, model, config: TrainConfig = TrainConfig()):
    """Joint verb + noun cross-entropy (1:1) with momentum SGD.

    Batches are drawn from a seeded permutation each epoch, so a run is a pure function
    of ``config.seed`` and the data under single-thread execution. Returns a
    :class:`TrainResult` with one dict per epoch (loss, verb/noun train accuracy).
    """
    x, verbs, nouns = clips_to_tensors(clips)
    opt = make_optimizer(model.parameters(), config)
    steps_per_epoch = sum(1 for s in range(0, len(clips), config.batch_size)
                          if min(config.batch_size, len(clips) - s) >= 2 or len(clips) < 2)
    total_steps = max(1, steps_per_epoch * config.epochs)
    sched = None
    if config.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1.0 + math.cos(math.pi * k / total_steps)))
    rng = np.random.default_rng([config.seed, 7])
    n = len(clips)
    result = TrainResult()
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(n))
        total, correct_v, correct_n = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs more than one sample
            vl, nl = model(x[idx])
            loss = F.cross_entropy(vl, verbs[idx]) + F.cross_entropy(nl, nouns[idx])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"loss became {loss.item()} at epoch {epoch}, batch starting {start} (lr={config.lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item() * len(idx)
            correct_v += int((vl.argmax(1) == verbs[idx]).sum())
            correct_n += int((nl.argmax(1) == nouns[idx]).sum())
        entry = {"epoch": epoch + 1, "loss": total / max(n, 1),
                 "verb_acc": correct_v / max(n, 1), "noun_acc": correct_n / max(n, 1)}
        log.info("epoch %(epoch)d loss %(loss).4f verb %(verb_acc).3f noun %(noun_acc).3f", entry)
        result.history.append(entry)
    return result


@torch.no_grad()
def predict_logits(model, clips, batch_size=64):
    """Eval-mode (verb_logits, noun_logits) as float64 numpy arrays."""
    model.eval()
    vs, ns = [], []
    for start in range(0, len(clips), batch_size):
        x, _, _ = clips_to_tensors(clips[start:start + batch_size])
        vl, nl = model(x)
        vs.append(vl.double().numpy())
        ns.append(nl.double().numpy())
    if not vs:
        return np.zeros((0, model.config.V)), np.zeros((0, model.config.N))
    return np.concatenate(vs), np.concatenate(ns)
