"""Temporal context network: a window of verb/noun logits -> low-rank action score matrix.

Two parallel three-layer MLP streams read the raw verb logits and the raw noun logits
of ``T_ctx`` consecutive clips centred on the clip being scored. The verb stream emits a
``V x R`` factor, the noun stream an ``R x N`` factor, and their product is the
``V x N`` action score matrix, so the head costs ``R (V + N)`` outputs instead of ``V N``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError, W3KitError
from .primitives import MLP, LayerSpec, kaiming_uniform_, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VocabConfig:
    V: int
    N: int
    R: int
    T_ctx: int = 5
    valid_actions: Optional[frozenset] = None

    def __post_init__(self):
        if self.V < 1 or self.N < 1:
            raise ConfigError(f"vocabulary sizes must be positive, got V={self.V}, N={self.N}")
        if not 1 <= self.R <= min(self.V, self.N):
            raise ConfigError(f"rank must satisfy 1 <= R <= min(V, N), got R={self.R}")
        if self.T_ctx < 1 or self.T_ctx % 2 == 0:
            raise ConfigError(f"T_ctx must be odd and >= 1, got {self.T_ctx}")
        if self.valid_actions is not None:
            object.__setattr__(self, "valid_actions", frozenset(map(tuple, self.valid_actions)))
            for v, n in self.valid_actions:
                if not (0 <= v < self.V and 0 <= n < self.N):
                    raise ConfigError(f"valid action {(v, n)} is outside the vocabulary")

    @property
    def center(self):
        return self.T_ctx // 2

    def valid_mask(self):
        """Boolean V x N mask of allowed actions (all True when unrestricted)."""
        if self.valid_actions is None:
            return np.ones((self.V, self.N), dtype=bool)
        mask = np.zeros((self.V, self.N), dtype=bool)
        for v, n in self.valid_actions:
            mask[v, n] = True
        return mask


EPIC = VocabConfig(V=125, N=352, R=16, T_ctx=5)
TOY = VocabConfig(V=8, N=12, R=4, T_ctx=5)


def final_layer_outputs(config: VocabConfig):
    """Output width of the two final layers together: V R + R N."""
    return config.V * config.R + config.R * config.N


@dataclass
class LogitWindow:
    verb_logits: np.ndarray  # (T_ctx, V)
    noun_logits: np.ndarray  # (T_ctx, N)
    center_index: int


@dataclass
class ActionScoreMatrix:
    U: np.ndarray   # (V, R)
    Wn: np.ndarray  # (R, N)
    A: np.ndarray   # (V, N)


def build_context_window(sequence: Sequence, i: int, T_ctx: int) -> LogitWindow:
    """Window of ``T_ctx`` clips centred on clip ``i``; rows past either end are zero logits.

    ``sequence`` holds ``(verb_logits, noun_logits, start_time)`` per clip of one video,
    ordered by start time.
    """
    if len(sequence) == 0:
        raise ConfigError("cannot build a context window from an empty sequence")
    if not 0 <= i < len(sequence):
        raise ConfigError(f"clip index {i} out of range for a sequence of length {len(sequence)}")
    if T_ctx < 1 or T_ctx % 2 == 0:
        raise ConfigError(f"T_ctx must be odd and >= 1, got {T_ctx}")
    starts = [float(s[2]) for s in sequence]
    if any(b < a for a, b in zip(starts, starts[1:])):
        raise ConfigError("sequence must be sorted by start time")
    V = len(sequence[0][0])
    N = len(sequence[0][1])
    half = T_ctx // 2
    verbs = np.zeros((T_ctx, V))
    nouns = np.zeros((T_ctx, N))
    for row, j in enumerate(range(i - half, i + half + 1)):
        if 0 <= j < len(sequence):
            verbs[row] = sequence[j][0]
            nouns[row] = sequence[j][1]
    return LogitWindow(verbs, nouns, half)


def _stream(in_features, hidden, out_features, dropout):
    widths = [in_features, *hidden, out_features]
    return MLP([LayerSpec(a, b, batch_norm=True, activation="prelu", dropout=dropout)
                for a, b in zip(widths, widths[1:])])


class CtxtNet(nn.Module):
    """Two parallel MLP streams producing rank-R action factors.

    Each layer is linear projection, batch norm, PReLU and dropout. The final batch-norm
    scale starts at ``final_gain`` so the initial score matrix is close to zero and the
    initial action distribution close to uniform.
    """

    def __init__(self, config: VocabConfig = TOY, hidden: Sequence[int] = (64, 64), dropout: float = 0.5,
                 final_gain: float = 0.1, seed: int = 0):
        super().__init__()
        if len(hidden) != 2:
            raise ConfigError("each CtxtNet stream has exactly three layers (two hidden widths)")
        self.config = config
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.verb_stream = _stream(config.T_ctx * config.V, hidden, config.V * config.R, dropout)
        self.noun_stream = _stream(config.T_ctx * config.N, hidden, config.R * config.N, dropout)
        kaiming_uniform_(self, torch.Generator().manual_seed(seed))
        with torch.no_grad():
            for stream in (self.verb_stream, self.noun_stream):
                stream.layers[-1][1].weight.fill_(final_gain)

    def final_layers(self):
        return self.verb_stream.layers[-1][0], self.noun_stream.layers[-1][0]

    def factors(self, verb_logits, noun_logits):
        """``verb_logits (B, T_ctx, V)``, ``noun_logits (B, T_ctx, N)`` -> U (B, V, R), Wn (B, R, N)."""
        c = self.config
        if verb_logits.shape[-2:] != (c.T_ctx, c.V) or noun_logits.shape[-2:] != (c.T_ctx, c.N):
            raise ShapeMismatchError(
                f"window shapes {tuple(verb_logits.shape[-2:])}/{tuple(noun_logits.shape[-2:])} do not match "
                f"T_ctx={c.T_ctx}, V={c.V}, N={c.N}",
                expected=((c.T_ctx, c.V), (c.T_ctx, c.N)),
                got=(tuple(verb_logits.shape[-2:]), tuple(noun_logits.shape[-2:])))
        B = verb_logits.shape[0]
        U = self.verb_stream(verb_logits.reshape(B, -1)).reshape(B, c.V, c.R)
        Wn = self.noun_stream(noun_logits.reshape(B, -1)).reshape(B, c.R, c.N)
        return U, Wn

    def forward(self, verb_logits, noun_logits):
        U, Wn = self.factors(verb_logits, noun_logits)
        return U @ Wn


def _as_tensor(x, like: nn.Module):
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def ctxtnet_forward(window: LogitWindow, model: CtxtNet) -> ActionScoreMatrix:
    """Eval-mode score matrix for a single window."""
    model.eval()
    U, Wn = model.factors(_as_tensor(window.verb_logits, model)[None], _as_tensor(window.noun_logits, model)[None])
    U, Wn = U[0].double().numpy(), Wn[0].double().numpy()
    return ActionScoreMatrix(U, Wn, U @ Wn)


@torch.no_grad()
def score_windows(model: CtxtNet, verb_windows, noun_windows, batch_size=256):
    """Eval-mode score matrices for stacked windows, ``(M, V, N)`` float64."""
    model.eval()
    out = []
    for s in range(0, len(verb_windows), batch_size):
        out.append(model(_as_tensor(verb_windows[s:s + batch_size], model),
                         _as_tensor(noun_windows[s:s + batch_size], model)).double().numpy())
    if not out:
        return np.zeros((0, model.config.V, model.config.N))
    return np.concatenate(out)


def rank_actions(scores: np.ndarray, valid_mask: Optional[np.ndarray] = None):
    """All (verb, noun, score) triples, descending score, ties by (verb, noun) ascending."""
    V, N = scores.shape
    vv, nn_ = np.meshgrid(np.arange(V), np.arange(N), indexing="ij")
    vv, nn_, flat = vv.ravel(), nn_.ravel(), scores.ravel()
    if valid_mask is not None:
        keep = valid_mask.ravel()
        vv, nn_, flat = vv[keep], nn_[keep], flat[keep]
    order = np.lexsort((nn_, vv, -flat))
    return [(int(vv[j]), int(nn_[j]), float(flat[j])) for j in order]


def action_prediction(A, config: VocabConfig):
    scores = A.A if isinstance(A, ActionScoreMatrix) else np.asarray(A)
    mask = None if config.valid_actions is None else config.valid_mask()
    return rank_actions(scores, mask)


def estimate_action_prior(labels, V: int, N: int, eps: float = 1e-8) -> np.ndarray:
    """Empirical (verb, noun) co-occurrence with an epsilon floor, normalised to sum 1."""
    counts = np.zeros((V, N))
    for v, n in labels:
        counts[v, n] += 1
    prior = counts + eps
    return prior / prior.sum()


def action_prior_baseline(verb_logits, noun_logits, prior) -> np.ndarray:
    """softmax(verb) x softmax(noun) reweighted elementwise by the action prior."""
    verb_logits = np.asarray(verb_logits, dtype=float)
    noun_logits = np.asarray(noun_logits, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (verb_logits.shape[-1], noun_logits.shape[-1]):
        raise ShapeMismatchError(
            f"prior shape {prior.shape} does not match V={verb_logits.shape[-1]}, N={noun_logits.shape[-1]}",
            expected=(verb_logits.shape[-1], noun_logits.shape[-1]), got=prior.shape)
    if (prior < 0).any():
        raise ConfigError("action prior must be non-negative")
    return softmax(verb_logits)[..., :, None] * softmax(noun_logits)[..., None, :] * prior


def outer_product_scores(verb_logits, noun_logits) -> np.ndarray:
    return softmax(np.asarray(verb_logits, dtype=float))[..., :, None] * \
        softmax(np.asarray(noun_logits, dtype=float))[..., None, :]


@dataclass
class CtxtTrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class CtxtTrainResult:
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def action_loss(scores, verbs, nouns, valid_mask=None):
    """Cross-entropy of the softmax over flattened V*N scores against (verb, noun) labels."""
    B, V, N = scores.shape
    flat = scores.reshape(B, V * N)
    if valid_mask is not None:
        flat = flat.masked_fill(~torch.as_tensor(valid_mask.reshape(-1)), float("-inf"))
    return F.cross_entropy(flat, verbs * N + nouns)


def train_ctxtnet(verb_windows, noun_windows, labels, model: CtxtNet,
                  config: CtxtTrainConfig = CtxtTrainConfig()) -> CtxtTrainResult:
    """Second-stage training with Adam on frozen first-stage logits.

    ``verb_windows (M, T_ctx, V)``, ``noun_windows (M, T_ctx, N)`` and ``labels (M, 2)``
    of (verb, noun) for the centre clip of each window.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
    if len(labels) == 0:
        raise W3KitError("cannot train CtxtNet on an empty dataset")
    xv = _as_tensor(verb_windows, model)
    xn = _as_tensor(noun_windows, model)
    if len(xv) != len(labels) or len(xn) != len(labels):
        raise ShapeMismatchError("windows and labels must have the same length")
    yv = torch.from_numpy(labels[:, 0])
    yn = torch.from_numpy(labels[:, 1])
    mask = None if model.config.valid_actions is None else model.config.valid_mask()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 11])
    result = CtxtTrainResult()
    M = len(labels)
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(M))
        total = 0.0
        seen = 0
        for s in range(0, M, config.batch_size):
            idx = order[s:s + config.batch_size]
            if len(idx) < 2 and M >= 2:
                continue
            if M == 1:
                idx = order.repeat(2)  # batch norm needs two samples
            loss = action_loss(model(xv[idx], xn[idx]), yv[idx], yn[idx], mask)
            if not math.isfinite(loss.item()):
                raise W3KitError(f"CtxtNet loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.step_losses.append(loss.item())
            total += loss.item() * len(idx)
            seen += len(idx)
        result.history.append({"epoch": epoch + 1, "loss": total / max(seen, 1)})
        log.info("ctxtnet epoch %d loss %.4f", epoch + 1, result.history[-1]["loss"])
    return result


def windows_from_videos(videos, T_ctx):
    """Stack centred windows for every clip of every video.

    ``videos`` is a list of per-video lists of ``(verb_logits, noun_logits, start_time)``;
    returns ``(verb_windows, noun_windows)`` in video-major, clip-minor order.
    """
    vw, nw = [], []
    for seq in videos:
        for i in range(len(seq)):
            w = build_context_window(seq, i, T_ctx)
            vw.append(w.verb_logits)
            nw.append(w.noun_logits)
    return np.asarray(vw), np.asarray(nw)
