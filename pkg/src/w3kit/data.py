"""Planted-signal synthetic video clips and Markov action scripts.

A clip shows one *target* object among static distractors. The noun is the target's
identity (shape x colour) and the verb is its motion pattern (direction x whether it
moves early or late in the clip), so recognising the action requires finding *what*
moves, *where* it is and *when* it moves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

SHAPES = ("square", "ring", "plus", "cross")
COLORS = (
    (1.00, 0.25, 0.20),
    (0.20, 0.95, 0.25),
    (0.25, 0.35, 1.00),
)
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))  # (dy, dx): right, left, down, up
OBJ = 5
STEP = 3
N_DISTRACTORS = 3


def _shape_masks():
    k = np.zeros((len(SHAPES), OBJ, OBJ), dtype=bool)
    k[0] = True
    k[1] = True
    k[1, 1:-1, 1:-1] = False
    k[2, OBJ // 2, :] = True
    k[2, :, OBJ // 2] = True
    k[3] = np.eye(OBJ, dtype=bool) | np.fliplr(np.eye(OBJ, dtype=bool))
    return k


SHAPE_MASKS = _shape_masks()


@dataclass(frozen=True)
class ToyVocab:
    V: int = 8
    N: int = 12
    T: int = 8
    H: int = 32
    W: int = 32

    def __post_init__(self):
        if self.V != 2 * len(DIRECTIONS):
            raise ConfigError(f"the toy renderer defines {2 * len(DIRECTIONS)} verbs, got V={self.V}")
        if self.N != len(SHAPES) * len(COLORS):
            raise ConfigError(f"the toy renderer defines {len(SHAPES) * len(COLORS)} nouns, got N={self.N}")
        if self.T < 8 or self.H < 24 or self.W < 24:
            raise ConfigError("toy clips need T >= 8 and H, W >= 24")


def verb_motion(verb):
    """(direction index, late) for a verb id."""
    return verb % len(DIRECTIONS), verb // len(DIRECTIONS)


def noun_identity(noun):
    """(shape index, colour index) for a noun id."""
    return noun // len(COLORS), noun % len(COLORS)


def moving_steps(T, late):
    """Frame transitions t -> t+1 during which the target moves."""
    half = T // 2
    return list(range(half, T - 1)) if late else list(range(0, half - 1))


def trajectory(start, verb, T):
    direction, late = verb_motion(verb)
    dy, dx = DIRECTIONS[direction]
    steps = set(moving_steps(T, late))
    pos = [tuple(start)]
    for t in range(T - 1):
        y, x = pos[-1]
        if t in steps:
            y, x = y + dy * STEP, x + dx * STEP
        pos.append((y, x))
    return pos


@dataclass
class SyntheticClip:
    clip_id: str
    frames: np.ndarray  # uint8, (T, 3, H, W); divide by 255 for [0, 1] pixels
    verb: int
    noun: int
    video_id: str
    position: int
    start_time: float
    meta: dict = field(default_factory=dict)

    def as_float(self):
        return self.frames.astype(np.float32) / 255.0


def _boxes_overlap(a, b, margin=1):
    (ay0, ax0, ay1, ax1), (by0, bx0, by1, bx1) = a, b
    return not (ay1 + margin <= by0 or by1 + margin <= ay0 or ax1 + margin <= bx0 or bx1 + margin <= ax0)


def _paint(canvas, top, left, noun):
    shape, color = noun_identity(noun)
    mask = SHAPE_MASKS[shape]
    region = canvas[:, top:top + OBJ, left:left + OBJ]
    for ch in range(3):
        region[ch][mask] = COLORS[color][ch]


def render_clip(rng: np.random.Generator, verb: int, noun: int, vocab: ToyVocab = ToyVocab(),
                noise: float = 0.04, n_distractors: int = N_DISTRACTORS, jitter: int = 1):
    """Render one clip; returns ``(frames uint8 (T,3,H,W), metadata)``."""
    T, H, W = vocab.T, vocab.H, vocab.W
    travel = STEP * len(moving_steps(T, False))
    direction, _ = verb_motion(verb)
    dy, dx = DIRECTIONS[direction]
    lo_y, hi_y = max(0, -dy * travel), H - OBJ - max(0, dy * travel)
    lo_x, hi_x = max(0, -dx * travel), W - OBJ - max(0, dx * travel)
    start = (int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1)))
    traj = trajectory(start, verb, T)
    ys = [p[0] for p in traj]
    xs = [p[1] for p in traj]
    target_box = (min(ys), min(xs), max(ys) + OBJ, max(xs) + OBJ)

    others = [n for n in range(vocab.N) if n != noun]
    distractor_ids = [int(n) for n in rng.choice(others, size=n_distractors, replace=False)]
    boxes = [target_box]
    distractors = []
    for did in distractor_ids:
        for _ in range(1000):
            y, x = int(rng.integers(0, H - OBJ + 1)), int(rng.integers(0, W - OBJ + 1))
            box = (y, x, y + OBJ, x + OBJ)
            if not any(_boxes_overlap(box, b, jitter + 1) for b in boxes):
                break
        else:  # pragma: no cover - 32x32 always has room for three 5x5 objects
            raise RuntimeError("could not place distractor")
        boxes.append(box)
        # distractors wobble by up to ``jitter`` px per frame around their anchor
        offs = rng.integers(-jitter, jitter + 1, size=(T, 2)) if jitter else np.zeros((T, 2), dtype=int)
        path = [[int(np.clip(y + oy, 0, H - OBJ)), int(np.clip(x + ox, 0, W - OBJ))] for oy, ox in offs]
        distractors.append({"noun": did, "pos": [y, x], "path": path})

    background = rng.uniform(0.0, 0.15, size=(3, H, W))
    frames = np.empty((T, 3, H, W))
    for t in range(T):
        canvas = background.copy()
        for d in distractors:
            _paint(canvas, d["path"][t][0], d["path"][t][1], d["noun"])
        _paint(canvas, traj[t][0], traj[t][1], noun)
        canvas += rng.normal(0.0, noise, size=canvas.shape)
        frames[t] = canvas
    frames = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    meta = {
        "target": {"noun": int(noun), "verb": int(verb), "trajectory": [list(p) for p in traj]},
        "distractors": distractors,
    }
    return frames, meta


def balanced_labels(rng, n, k):
    """n labels over k classes, each appearing floor(n/k) or ceil(n/k) times, shuffled."""
    labels = np.resize(np.arange(k), n)
    rng.shuffle(labels)
    return labels


def generate_planted_dataset(seed: int, n_clips: int, vocab: ToyVocab = ToyVocab(),
                             prefix: str = "clip", **render_kw):
    """Class-balanced clips; deterministic in ``seed``. Each clip is its own one-clip video."""
    if n_clips < 0:
        raise ConfigError("n_clips must be non-negative")
    rng = np.random.default_rng([seed, 0])
    verbs = balanced_labels(rng, n_clips, vocab.V)
    nouns = balanced_labels(rng, n_clips, vocab.N)
    clips = []
    for i in range(n_clips):
        crng = np.random.default_rng([seed, 1, i])
        frames, meta = render_clip(crng, int(verbs[i]), int(nouns[i]), vocab, **render_kw)
        cid = f"{prefix}{seed}_{i:05d}"
        clips.append(SyntheticClip(cid, frames, int(verbs[i]), int(nouns[i]), cid, 0, 0.0, meta))
    return clips


def recover_labels(clip: SyntheticClip):
    """Label oracle: read the generator's placement metadata and the rendered pixels.

    The colour comes from the pixel at the target's first position, the shape from
    which mask pattern the bright pixels form there, and the verb from the displacement
    between frames.
    """
    traj = clip.meta["target"]["trajectory"]
    frames = clip.as_float()
    y, x = traj[0]
    patch = frames[0, :, y:y + OBJ, x:x + OBJ]
    bright = patch.max(axis=0) > 0.5
    shape = int(np.argmax([(bright == m).sum() for m in SHAPE_MASKS]))
    centre = patch[:, OBJ // 2, OBJ // 2]
    color = int(np.argmin([np.abs(centre - np.asarray(c)).sum() for c in COLORS]))
    if shape == SHAPES.index("ring"):  # hollow centre: sample the border instead
        edge = patch[:, 0, OBJ // 2]
        color = int(np.argmin([np.abs(edge - np.asarray(c)).sum() for c in COLORS]))
    noun = shape * len(COLORS) + color

    moves = [t for t in range(len(traj) - 1) if traj[t + 1] != traj[t]]
    dy = int(np.sign(traj[-1][0] - traj[0][0]))
    dx = int(np.sign(traj[-1][1] - traj[0][1]))
    direction = DIRECTIONS.index((dy, dx))
    late = int(moves[0] >= len(traj) // 2 - 1)
    return direction + len(DIRECTIONS) * late, noun


# --- Markov action scripts -------------------------------------------------------------


@dataclass
class MarkovActionScript:
    """First-order Markov chain over (verb, noun) actions; state index = verb * N + noun."""

    V: int
    N: int
    transition: np.ndarray
    initial: np.ndarray
    clips_per_video: int = 10

    def __post_init__(self):
        S = self.V * self.N
        self.transition = np.asarray(self.transition, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        if self.transition.shape != (S, S) or self.initial.shape != (S,):
            raise ConfigError(f"script needs a {S}x{S} transition matrix and {S} initial probabilities")
        if (self.transition < 0).any() or not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("transition rows must be non-negative and sum to 1")
        if (self.initial < 0).any() or not np.isclose(self.initial.sum(), 1.0, atol=1e-9):
            raise ConfigError("initial distribution must be non-negative and sum to 1")
        if self.clips_per_video < 1:
            raise ConfigError("clips_per_video must be positive")

    def state(self, verb, noun):
        return verb * self.N + noun

    def action(self, state):
        return divmod(int(state), self.N)

    @classmethod
    def open_close(cls, V=8, N=12, p=0.8, clips_per_video=10):
        """Verbs pair up as (opener 2k, closer 2k+1); "open X" is followed by "close X" w.p. p.

        With probability 1 - p an opener is followed by a uniformly random action; a
        closer is followed by a uniformly random opener.
        """
        if V % 2:
            raise ConfigError("open/close scripts need an even verb count")
        S = V * N
        trans = np.zeros((S, S))
        openers = [v * N + n for v in range(0, V, 2) for n in range(N)]
        for v in range(V):
            for n in range(N):
                s = v * N + n
                if v % 2 == 0:
                    trans[s] = (1.0 - p) / S
                    trans[s, (v + 1) * N + n] += p
                else:
                    trans[s, openers] = 1.0 / len(openers)
        initial = np.zeros(S)
        initial[openers] = 1.0 / len(openers)
        return cls(V, N, trans, initial, clips_per_video)

    def to_json(self):
        return {"V": self.V, "N": self.N, "clips_per_video": self.clips_per_video,
                "initial": self.initial.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_json(cls, obj):
        if obj.get("kind") == "open_close":
            return cls.open_close(obj.get("V", 8), obj.get("N", 12), obj.get("p", 0.8),
                                  obj.get("clips_per_video", 10))
        try:
            return cls(obj["V"], obj["N"], obj["transition"], obj["initial"],
                       obj.get("clips_per_video", 10))
        except KeyError as exc:
            raise ConfigError(f"context script is missing field {exc}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def sample_action_sequences(seed: int, script: MarkovActionScript, n_videos: int):
    """Per-video lists of (verb, noun) actions sampled from ``script``."""
    rng = np.random.default_rng([seed, 2])
    S = script.V * script.N
    videos = []
    for _ in range(n_videos):
        s = rng.choice(S, p=script.initial)
        seq = [script.action(s)]
        for _ in range(script.clips_per_video - 1):
            s = rng.choice(S, p=script.transition[s])
            seq.append(script.action(s))
        videos.append(seq)
    return videos


def generate_context_sequences(seed: int, script: MarkovActionScript, n_videos: int,
                               vocab: Optional[ToyVocab] = None, prefix: str = "vid",
                               noise: float = 0.04):
    """Rendered clip sequences whose labels follow ``script``; one list of clips per video.

    Without ``vocab`` only labels are produced (``frames`` is an empty array), which is
    what the logit-level CtxtNet experiments need.
    """
    videos = []
    for v, seq in enumerate(sample_action_sequences(seed, script, n_videos)):
        vid = f"{prefix}{seed}_{v:04d}"
        clips = []
        for i, (verb, noun) in enumerate(seq):
            cid = f"{vid}_{i:03d}"
            if vocab is not None:
                frames, meta = render_clip(np.random.default_rng([seed, 3, v, i]), verb, noun, vocab, noise)
            else:
                frames, meta = np.zeros((0,), dtype=np.uint8), {}
            clips.append(SyntheticClip(cid, frames, verb, noun, vid, i, float(i), meta))
        videos.append(clips)
    return videos
