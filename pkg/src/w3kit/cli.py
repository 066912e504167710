"""``w3kit`` command line: data generation, two-stage training, prediction, fusion, evaluation.

Exit codes: 0 success, 1 failed check or runtime error, 2 filesystem conflict,
3 shape / vocabulary mismatch, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import io
from .backbone import BackboneConfig, ToyBackbone
from .ctxtnet import (CtxtNet, CtxtTrainConfig, VocabConfig, rank_actions, score_windows, train_ctxtnet,
                      windows_from_videos)
from .data import MarkovActionScript, ToyVocab, generate_context_sequences, generate_planted_dataset
from .errors import ConfigError, MissingPredictionError, ShapeMismatchError, W3KitError
from .metrics import ClipPrediction, ensemble_logits, evaluate, format_report, report_json
from .train import TrainConfig, predict_logits, train_backbone

log = logging.getLogger("w3kit")

EXIT_OK, EXIT_FAIL, EXIT_CONFLICT, EXIT_SHAPE, EXIT_USAGE = 0, 1, 2, 3, 64


class UsageError(W3KitError):
    pass


class ConflictError(W3KitError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; loadable from JSON and overridable with ``--set key=value``."""
    seed: int = 0
    V: int = 8
    N: int = 12
    T: int = 8
    H: int = 32
    W: int = 32
    n_clips: int = 2000
    n_videos: int = 100
    n_distractors: int = 6
    jitter: int = 1
    noise: float = 0.08
    attention: str = "w3"
    temporal_enabled: bool = True
    widths: tuple = (8, 16, 16)
    reduction: int = 4
    K_c_vid: int = 3
    epochs: int = 12
    lr: float = 0.02
    momentum: float = 0.9
    schedule: str = "cosine"
    batch_size: int = 16
    T_ctx: int = 5
    R: int = 4
    ctxt_hidden: tuple = (64, 64)
    ctxt_epochs: int = 30
    ctxt_lr: float = 1e-3
    ctxt_batch_size: int = 64

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def update(self, values: dict):
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"unknown configuration key(s): {', '.join(unknown)}")
        for k, v in values.items():
            setattr(self, k, _coerce(getattr(self, k), v, k))
        return self

    def vocab(self):
        return ToyVocab(self.V, self.N, self.T, self.H, self.W)

    def render_kwargs(self):
        return {"n_distractors": self.n_distractors, "jitter": self.jitter, "noise": self.noise}

    def backbone(self):
        attention = self.attention
        if attention == "w3" and not self.temporal_enabled:
            attention = "w2"
        return BackboneConfig(V=self.V, N=self.N, T=self.T, widths=self.widths, attention=attention,
                              reduction=self.reduction, temporal_kernel=self.K_c_vid)


def _coerce(current, value, key):
    """Parse ``value`` (string from the command line or JSON value) to the type of ``current``."""
    try:
        if isinstance(value, str) and not isinstance(current, str):
            value = json.loads(value) if not isinstance(current, bool) else value
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(current, tuple):
            return tuple(int(x) for x in value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return type(current)(value)
    except (ValueError, TypeError, json.JSONDecodeError):
        raise UsageError(f"bad value for {key}: {value!r}") from None


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a JSON object")
        cfg.update(data)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg.update(overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# --- argument parsing -------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON file of run configuration keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int, help="the single source of randomness (overrides config)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = Parser(prog="w3kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int)
    p.add_argument("--context-script", help="JSON Markov action script; produces per-video sequences")
    p.add_argument("--n-videos", type=int)

    p = sub.add_parser("train-backbone", help="first-stage SGD training of the toy backbone")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attention", choices=("none", "w2", "w3"))
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-ctxtnet", help="second-stage Adam training on frozen predictions")
    _common(p)
    p.add_argument("--data", required=True, help="sequence dataset (video ids and start times)")
    p.add_argument("--predictions", help="first-stage prediction dump for --data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="write a prediction file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="backbone checkpoint")
    p.add_argument("--ctxtnet", help="CtxtNet checkpoint; rescores actions of --predictions")
    p.add_argument("--predictions", help="first-stage predictions (with --ctxtnet)")
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="toy", choices=("toy", "epic"))

    p = sub.add_parser("ensemble", help="logit-level fusion of prediction files")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Top-1/Top-5 verb, noun and action report")
    _common(p)
    p.add_argument("predictions", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="S1")
    p.add_argument("--json", dest="json_out", help="also write the report as JSON")
    p.add_argument("--out", help="also write the text report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks of every differentiable op")
    _common(p)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("experiment", help="attention and context comparisons on toy data")
    _common(p)
    p.add_argument("--out", required=True, help="directory for report.json and report.txt")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    return parser


# --- helpers --------------------------------------------------------------------------


def _require_file(path, what):
    if not path or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_dataset(path):
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"no dataset manifest in {path}")


def _check_output(path, force, directory=False):
    p = Path(path)
    if directory:
        if io.is_nonempty_dir(p) and not force:
            raise ConflictError(f"{p} exists and is not empty (use --force)")
    elif p.exists() and not force:
        raise ConflictError(f"{p} already exists (use --force)")
    if not p.parent.exists():
        raise UsageError(f"parent directory of {p} does not exist")


def _dataset_vocab(manifest):
    v = manifest.get("vocab", {})
    return int(v.get("V", 0)), int(v.get("N", 0))


def _check_vocab(expected, got, what):
    if tuple(expected) != tuple(got):
        raise ShapeMismatchError(f"{what}: model vocabulary (V, N)={tuple(expected)} but dataset has "
                                 f"(V, N)={tuple(got)}", expected=tuple(expected), got=tuple(got))


def _sequences(clips, preds_by_id):
    """Group clips by video, ordered by start time, pairing each with its logits."""
    videos = {}
    for c in clips:
        videos.setdefault(c.video_id, []).append(c)
    missing = [c.clip_id for c in clips if c.clip_id not in preds_by_id]
    if missing:
        raise MissingPredictionError(missing)
    ordered, seqs = [], []
    for vid in sorted(videos):
        vc = sorted(videos[vid], key=lambda c: (c.start_time, c.position))
        ordered.append(vc)
        seqs.append([(preds_by_id[c.clip_id].verb_logits, preds_by_id[c.clip_id].noun_logits, c.start_time)
                     for c in vc])
    return ordered, seqs


# --- commands -------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    _check_output(args.out, args.force, directory=True)
    if args.n_clips is not None:
        cfg.n_clips = args.n_clips
    if args.n_videos is not None:
        cfg.n_videos = args.n_videos
    vocab = cfg.vocab()
    info = {"seed": cfg.seed, "vocab": asdict(vocab), "render": cfg.render_kwargs()}
    if args.context_script:
        _require_file(args.context_script, "context script")
        script = MarkovActionScript.load(args.context_script)
        _check_vocab((vocab.V, vocab.N), (script.V, script.N), "context script")
        videos = generate_context_sequences(cfg.seed, script, cfg.n_videos, vocab, noise=cfg.noise)
        clips = [c for v in videos for c in v]
        info.update(kind="sequences", script=script.to_json())
    else:
        if cfg.n_clips < 1:
            raise UsageError("--n-clips must be positive")
        clips = generate_planted_dataset(cfg.seed, cfg.n_clips, vocab, **cfg.render_kwargs())
        info["kind"] = "planted"
    if args.force and Path(args.out).exists():
        for f in (Path(args.out) / "clips").glob("*.npy"):
            f.unlink()
    manifest = io.write_dataset(args.out, clips, info)
    print(f"wrote {manifest['n_clips']} clips to {args.out}")


def cmd_train_backbone(args, cfg):
    _require_dataset(args.data)
    _check_output(args.out, args.force)
    if args.attention:
        cfg.attention = args.attention
    if args.epochs is not None:
        cfg.epochs = args.epochs
    manifest, clips = io.read_dataset(args.data)
    bcfg = cfg.backbone()
    _check_vocab((bcfg.V, bcfg.N), _dataset_vocab(manifest), "train-backbone")
    T = clips[0].frames.shape[0] if clips else bcfg.T
    if T != bcfg.T:
        raise ShapeMismatchError(f"backbone expects T={bcfg.T} frames, dataset clips have T={T}",
                                 expected=bcfg.T, got=T)
    torch.manual_seed(cfg.seed)
    model = ToyBackbone(bcfg, seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                       seed=cfg.seed, schedule=cfg.schedule)
    result = train_backbone(clips, model, tcfg)
    meta = {"backbone": asdict(bcfg), "train": asdict(tcfg), "history": result.history}
    meta["backbone"]["widths"] = list(bcfg.widths)
    io.save_module(args.out, model, "backbone", meta)
    last = result.history[-1] if result.history else {}
    print(f"saved backbone to {args.out}" + (f" (final loss {last['loss']:.4f})" if last else ""))


def _load_backbone(path):
    state, meta = io.load_checkpoint(path, "backbone")
    bcfg = BackboneConfig(**meta["backbone"])
    model = ToyBackbone(bcfg, seed=0)
    io.load_into(model, state)
    return model, bcfg


def _load_ctxtnet(path):
    state, meta = io.load_checkpoint(path, "ctxtnet")
    vocab = VocabConfig(**meta["vocab"])
    model = CtxtNet(vocab, hidden=tuple(meta["hidden"]), dropout=meta.get("dropout", 0.5))
    io.load_into(model, state)
    return model, vocab


def cmd_train_ctxtnet(args, cfg):
    if not args.predictions:
        raise UsageError("train-ctxtnet needs a frozen first-stage prediction dump (--predictions)")
    _require_file(args.predictions, "prediction dump")
    _require_dataset(args.data)
    _check_output(args.out, args.force)
    manifest, clips = io.read_dataset(args.data, load_frames=False)
    _, preds = io.read_predictions(args.predictions)
    by_id = {p.clip_id: p for p in preds}
    V, N = _dataset_vocab(manifest)
    if preds:
        _check_vocab((len(preds[0].verb_logits), len(preds[0].noun_logits)), (V, N), "train-ctxtnet")
    ordered, seqs = _sequences(clips, by_id)
    vocab = VocabConfig(V, N, cfg.R, cfg.T_ctx)
    vw, nw = windows_from_videos(seqs, cfg.T_ctx)
    labels = np.array([(c.verb, c.noun) for vc in ordered for c in vc], dtype=np.int64)
    torch.manual_seed(cfg.seed)
    model = CtxtNet(vocab, hidden=cfg.ctxt_hidden, seed=cfg.seed)
    tcfg = CtxtTrainConfig(epochs=cfg.ctxt_epochs, lr=cfg.ctxt_lr, batch_size=cfg.ctxt_batch_size, seed=cfg.seed)
    result = train_ctxtnet(vw, nw, labels, model, tcfg)
    meta = {"vocab": {"V": V, "N": N, "R": cfg.R, "T_ctx": cfg.T_ctx}, "hidden": list(cfg.ctxt_hidden),
            "dropout": model.dropout, "train": asdict(tcfg), "history": result.history}
    io.save_module(args.out, model, "ctxtnet", meta)
    print(f"saved CtxtNet to {args.out}")


def cmd_predict(args, cfg):
    _require_dataset(args.data)
    _check_output(args.out, args.force)
    if bool(args.checkpoint) == bool(args.ctxtnet):
        raise UsageError("predict needs exactly one of --checkpoint (backbone) or --ctxtnet")
    if args.checkpoint:
        _require_file(args.checkpoint, "checkpoint")
        manifest, clips = io.read_dataset(args.data)
        model, bcfg = _load_backbone(args.checkpoint)
        _check_vocab((bcfg.V, bcfg.N), _dataset_vocab(manifest), "predict")
        verb, noun = predict_logits(model, clips)
        preds = [ClipPrediction(c.clip_id, v, n) for c, v, n in zip(clips, verb, noun)]
    else:
        _require_file(args.ctxtnet, "CtxtNet checkpoint")
        if not args.predictions:
            raise UsageError("--ctxtnet needs the first-stage --predictions it rescores")
        _require_file(args.predictions, "prediction dump")
        manifest, clips = io.read_dataset(args.data, load_frames=False)
        model, vocab = _load_ctxtnet(args.ctxtnet)
        _check_vocab((vocab.V, vocab.N), _dataset_vocab(manifest), "predict")
        _, first = io.read_predictions(args.predictions)
        by_id = {p.clip_id: p for p in first}
        ordered, seqs = _sequences(clips, by_id)
        vw, nw = windows_from_videos(seqs, vocab.T_ctx)
        scores = score_windows(model, vw, nw)
        mask = None if vocab.valid_actions is None else vocab.valid_mask()
        flat = [c for vc in ordered for c in vc]
        # verb and noun logits are passed through untouched; only the action ranking changes
        preds = [ClipPrediction(c.clip_id, by_id[c.clip_id].verb_logits, by_id[c.clip_id].noun_logits,
                                rank_actions(scores[i], mask)) for i, c in enumerate(flat)]
    io.write_predictions(args.out, preds, task=args.task)
    print(f"wrote {len(preds)} predictions to {args.out}")


def cmd_ensemble(args, cfg):
    for path in args.inputs:
        _require_file(path, "prediction file")
    _check_output(args.out, args.force)
    if args.weights is not None and len(args.weights) != len(args.inputs):
        raise UsageError("give one --weights value per input file")
    loaded = [io.read_predictions(p, modality=f"{i:03d}") for i, p in enumerate(args.inputs)]
    tasks = {t for t, _ in loaded}
    if len(tasks) != 1:
        raise UsageError(f"cannot ensemble files of different tasks: {sorted(tasks)}")
    per_file = [{p.clip_id: p for p in preds} for _, preds in loaded]
    ids = set(per_file[0])
    for other in per_file[1:]:
        if set(other) != ids:
            raise MissingPredictionError(sorted(ids.symmetric_difference(other)))
    out = [ensemble_logits([f[cid] for f in per_file], args.weights) for cid in sorted(ids)]
    io.write_predictions(args.out, out, task=tasks.pop())
    print(f"wrote {len(out)} fused predictions to {args.out}")


def cmd_evaluate(args, cfg):
    for path in args.predictions:
        _require_file(path, "prediction file")
    _require_dataset(args.data)
    for path in (args.json_out, args.out):
        if path:
            _check_output(path, args.force)
    manifest, clips = io.read_dataset(args.data, load_frames=False)
    truths = io.truths_from_clips(clips)
    V, N = _dataset_vocab(manifest)
    results = {}
    for path in args.predictions:
        _, preds = io.read_predictions(path)
        if preds:
            _check_vocab((len(preds[0].verb_logits), len(preds[0].noun_logits)), (V, N), path)
        results[Path(path).stem] = {args.split: evaluate(preds, truths)}
    text = format_report(results, splits=(args.split,))
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    if args.json_out:
        Path(args.json_out).write_text(report_json(results))


def run_gradchecks(epsilon=1e-4, tolerance=1e-3, seed=0):
    """Finite-difference checks of every differentiable op; returns ``[(name, report)]``."""
    from .gradchecks import all_checks
    return [(name, fn(epsilon, tolerance, seed)) for name, fn in all_checks()]


def cmd_gradcheck(args, cfg):
    failed = 0
    for name, rep in run_gradchecks(args.epsilon, args.tolerance, cfg.seed):
        print(f"{'PASS' if rep.passed else 'FAIL'} {name}: max rel error {rep.max_rel_error:.3e}")
        failed += not rep.passed
    return EXIT_FAIL if failed else EXIT_OK


def cmd_experiment(args, cfg):
    from .experiment import ExperimentConfig, run_experiment, write_report
    _check_output(args.out, args.force, directory=True)
    kw = {"n_distractors": cfg.n_distractors, "jitter": cfg.jitter, "noise": cfg.noise, "widths": cfg.widths,
          "reduction": cfg.reduction, "temporal_kernel": cfg.K_c_vid, "epochs": cfg.epochs, "lr": cfg.lr,
          "schedule": cfg.schedule,
          "batch_size": cfg.batch_size, "n_train": cfg.n_clips, "T_ctx": cfg.T_ctx, "R": cfg.R,
          "ctxt_epochs": cfg.ctxt_epochs, "ctxt_lr": cfg.ctxt_lr, "ctxt_hidden": cfg.ctxt_hidden,
          "data_seed": cfg.seed}
    if args.seeds:
        kw["seeds"] = tuple(args.seeds)
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    report = run_experiment(ExperimentConfig(**kw))
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    write_report(report, out / "report.json", out / "report.txt")
    sys.stdout.write(report["text"])


COMMANDS = {"gen-data": cmd_gen_data, "train-backbone": cmd_train_backbone, "train-ctxtnet": cmd_train_ctxtnet,
            "predict": cmd_predict, "ensemble": cmd_ensemble, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck, "experiment": cmd_experiment}


def _set_threads():
    raw = os.environ.get("W3KIT_NUM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"W3KIT_NUM_THREADS must be an integer, got {raw!r}") from None
    torch.set_num_threads(max(1, n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        cfg = load_run_config(args)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"w3kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConflictError as exc:
        print(f"w3kit: error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except ShapeMismatchError as exc:
        print(f"w3kit: shape mismatch: {exc} (expected {exc.expected}, got {exc.got})", file=sys.stderr)
        return EXIT_SHAPE
    except ConfigError as exc:
        print(f"w3kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except W3KitError as exc:
        print(f"w3kit: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
