import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from w3kit import io
from w3kit.backbone import BackboneConfig, ToyBackbone
from w3kit.cli import RunConfig, UsageError, main
from w3kit.errors import ConfigError, ShapeMismatchError
from w3kit.metrics import ClipPrediction, evaluate

SMALL = ["--set", "widths=[4,8,8]", "--set", "epochs=1", "--set", "n_distractors=3"]


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset, a one-epoch backbone checkpoint and its prediction file."""
    root = tmp_path_factory.mktemp("ws")
    assert run("gen-data", "--seed", 1, "--out", root / "data", "--n-clips", 24, *SMALL) == 0
    assert run("train-backbone", "--seed", 0, "--data", root / "data", "--out", root / "bb.json", *SMALL) == 0
    assert run("predict", "--data", root / "data", "--checkpoint", root / "bb.json", "--out", root / "rgb.json") == 0
    return root


# --- formats ------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = ToyBackbone(BackboneConfig(widths=(4, 8, 8)), seed=2)
    io.save_module(tmp_path / "m.json", m, "backbone", {"note": 1})
    state, meta = io.load_checkpoint(tmp_path / "m.json", "backbone")
    m2 = io.load_into(ToyBackbone(BackboneConfig(widths=(4, 8, 8)), seed=5), state)
    assert io.state_checksum(m) == io.state_checksum(m2) and meta == {"note": 1}
    with pytest.raises(ConfigError):
        io.load_checkpoint(tmp_path / "m.json", "ctxtnet")
    with pytest.raises(ShapeMismatchError):
        io.load_into(ToyBackbone(BackboneConfig(widths=(4, 8, 16))), state)


def test_prediction_file_layout(tmp_path):
    rng = np.random.default_rng(0)
    preds = [ClipPrediction(f"c{i}", rng.normal(size=8), rng.normal(size=12)) for i in (2, 0, 1)]
    io.write_predictions(tmp_path / "p.json", preds)
    obj = json.loads((tmp_path / "p.json").read_text())
    assert obj["version"] == "w3kit-v1" and obj["task"] == "toy"
    assert list(obj["results"]) == ["c0", "c1", "c2"]
    rec = obj["results"]["c0"]
    assert len(rec["verb"]) == 8 and len(rec["noun"]) == 12 and len(rec["action"]) == 96
    _, back = io.read_predictions(tmp_path / "p.json")
    for p in back:
        q = next(x for x in preds if x.clip_id == p.clip_id)
        assert np.array_equal(p.verb_logits, q.verb_logits) and np.array_equal(p.noun_logits, q.noun_logits)


def test_prediction_file_truncates_to_top_100(tmp_path):
    p = ClipPrediction("a", np.zeros(10), np.zeros(20))
    io.write_predictions(tmp_path / "p.json", [p])
    assert len(json.loads((tmp_path / "p.json").read_text())["results"]["a"]["action"]) == 100


def test_wrong_version_rejected(tmp_path):
    (tmp_path / "x.json").write_text('{"version": "other"}')
    with pytest.raises(ConfigError):
        io.read_predictions(tmp_path / "x.json")


# --- run configuration --------------------------------------------------------------------

def test_run_config_parsing():
    cfg = RunConfig().update({"epochs": "3", "widths": "[2,4,4]", "temporal_enabled": "false", "lr": 0.5})
    assert cfg.epochs == 3 and cfg.widths == (2, 4, 4) and cfg.temporal_enabled is False and cfg.lr == 0.5
    assert cfg.backbone().attention == "w2"
    with pytest.raises(UsageError):
        RunConfig().update({"nonsense": 1})
    with pytest.raises(UsageError):
        RunConfig().update({"epochs": "many"})


def test_unknown_config_key_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": 1, "colour": "red"}')
    assert run("gen-data", "--out", tmp_path / "d", "--config", tmp_path / "c.json") == 64
    assert run("gen-data", "--out", tmp_path / "d", "--set", "bogus=1") == 64


# --- commands -----------------------------------------------------------------------------

def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--seed", "1"])
    assert info.value.code == 64


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 64


def test_gen_data_manifest(workspace):
    manifest = io.read_manifest(workspace / "data")
    assert manifest["n_clips"] == len(manifest["clips"]) == 24
    assert len(list((workspace / "data" / "clips").glob("*.npy"))) == 24


def test_gen_data_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--seed", 4, "--out", tmp_path / name, "--n-clips", 6) == 0
    assert sha(tmp_path / "a" / "manifest.json") == sha(tmp_path / "b" / "manifest.json")


def test_gen_data_refuses_non_empty_dir(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "keep.txt").write_text("x")
    assert run("gen-data", "--out", tmp_path / "d", "--n-clips", 2) == 2
    assert run("gen-data", "--out", tmp_path / "d", "--n-clips", 2, "--force") == 0


def test_gen_data_context_script(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"kind": "open_close", "p": 0.8, "clips_per_video": 4}))
    assert run("gen-data", "--out", tmp_path / "d", "--context-script", tmp_path / "s.json", "--n-videos", 3) == 0
    manifest = io.read_manifest(tmp_path / "d")
    assert manifest["kind"] == "sequences" and manifest["n_clips"] == 12
    assert len({c["video_id"] for c in manifest["clips"]}) == 3


def test_vocab_mismatch_exits_3(workspace, tmp_path, capsys):
    assert run("train-backbone", "--data", workspace / "data", "--out", tmp_path / "bb.json", "--set", "N=6",
               *SMALL) == 3
    assert "(8, 6)" in capsys.readouterr().err
    m = ToyBackbone(BackboneConfig(N=6, widths=(4, 8, 8)))
    cfg = {"V": 8, "N": 6, "T": 8, "widths": [4, 8, 8], "shift_fraction": 0.25, "attention": "w3",
           "reduction": 4, "temporal_kernel": 3, "spatial_kernel": 7}
    io.save_module(tmp_path / "bb6.json", m, "backbone", {"backbone": cfg})
    code = run("predict", "--data", workspace / "data", "--checkpoint", tmp_path / "bb6.json",
               "--out", tmp_path / "p.json")
    assert code == 3
    err = capsys.readouterr().err
    assert "(8, 6)" in err and "(8, 12)" in err


def test_existing_output_is_conflict(workspace):
    assert run("predict", "--data", workspace / "data", "--checkpoint", workspace / "bb.json",
               "--out", workspace / "rgb.json") == 2


def test_evaluate_one_hot_predictions_is_perfect(workspace, tmp_path, capsys):
    _, clips = io.read_dataset(workspace / "data", load_frames=False)
    preds = [ClipPrediction(c.clip_id, np.eye(8)[c.verb], np.eye(12)[c.noun]) for c in clips]
    io.write_predictions(tmp_path / "truth.json", preds)
    assert run("evaluate", tmp_path / "truth.json", "--data", workspace / "data", "--json", tmp_path / "r.json") == 0
    res = json.loads((tmp_path / "r.json").read_text())["truth"]["S1"]
    assert all(res[t]["top1"] == 100.0 for t in ("verb", "noun", "action"))


def test_evaluate_matches_unit_metrics(workspace, tmp_path):
    assert run("evaluate", workspace / "rgb.json", "--data", workspace / "data", "--json", tmp_path / "r.json") == 0
    _, preds = io.read_predictions(workspace / "rgb.json")
    _, clips = io.read_dataset(workspace / "data", load_frames=False)
    expected = evaluate(preds, io.truths_from_clips(clips))
    assert json.loads((tmp_path / "r.json").read_text())["rgb"]["S1"] == expected


def test_single_file_ensemble_is_identity(workspace, tmp_path):
    assert run("ensemble", workspace / "rgb.json", "--out", tmp_path / "e.json") == 0
    a = json.loads((workspace / "rgb.json").read_text())["results"]
    b = json.loads((tmp_path / "e.json").read_text())["results"]
    assert a == b
    assert (workspace / "rgb.json").read_bytes() == (tmp_path / "e.json").read_bytes()


def test_two_file_ensemble_is_mean(workspace, tmp_path):
    _, preds = io.read_predictions(workspace / "rgb.json")
    shifted = [ClipPrediction(p.clip_id, p.verb_logits + 1.0, p.noun_logits * 2.0) for p in preds]
    io.write_predictions(tmp_path / "flow.json", shifted)
    assert run("ensemble", workspace / "rgb.json", tmp_path / "flow.json", "--out", tmp_path / "e.json") == 0
    _, fused = io.read_predictions(tmp_path / "e.json")
    by_id = {p.clip_id: p for p in preds}
    for f in fused:
        np.testing.assert_allclose(f.verb_logits, by_id[f.clip_id].verb_logits + 0.5, rtol=0, atol=1e-9)
        np.testing.assert_allclose(f.noun_logits, by_id[f.clip_id].noun_logits * 1.5, rtol=0, atol=1e-9)


def test_train_ctxtnet_requires_prediction_dump(workspace, tmp_path):
    assert run("train-ctxtnet", "--data", workspace / "data", "--out", tmp_path / "c.json") == 64
    assert run("train-ctxtnet", "--data", workspace / "data", "--predictions", tmp_path / "none.json",
               "--out", tmp_path / "c.json") == 64


def test_two_stage_pipeline_keeps_verb_noun_and_backbone(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"kind": "open_close", "clips_per_video": 5}))
    assert run("gen-data", "--seed", 3, "--out", tmp_path / "d", "--context-script", tmp_path / "s.json",
               "--n-videos", 4) == 0
    assert run("train-backbone", "--data", tmp_path / "d", "--out", tmp_path / "bb.json", *SMALL) == 0
    assert run("predict", "--data", tmp_path / "d", "--checkpoint", tmp_path / "bb.json", "--out",
               tmp_path / "rgb.json") == 0
    before = sha(tmp_path / "bb.json")
    assert run("train-ctxtnet", "--data", tmp_path / "d", "--predictions", tmp_path / "rgb.json", "--out",
               tmp_path / "ctx.json", "--set", "ctxt_epochs=2") == 0
    assert sha(tmp_path / "bb.json") == before
    assert run("predict", "--data", tmp_path / "d", "--ctxtnet", tmp_path / "ctx.json", "--predictions",
               tmp_path / "rgb.json", "--out", tmp_path / "ctxp.json") == 0
    a = json.loads((tmp_path / "rgb.json").read_text())["results"]
    b = json.loads((tmp_path / "ctxp.json").read_text())["results"]
    assert a.keys() == b.keys()
    for cid in a:
        assert a[cid]["verb"] == b[cid]["verb"] and a[cid]["noun"] == b[cid]["noun"]
    assert any(a[cid]["action"] != b[cid]["action"] for cid in a)


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS apply_w3" in out and "PASS ctxtnet_forward" in out


def test_gradcheck_fails_with_impossible_tolerance():
    assert run("gradcheck", "--tolerance", "0") == 1


def test_thread_env_validation(monkeypatch, tmp_path):
    monkeypatch.setenv("W3KIT_NUM_THREADS", "lots")
    assert run("gen-data", "--out", tmp_path / "d", "--n-clips", 2) == 64
    monkeypatch.setenv("W3KIT_NUM_THREADS", "1")
    assert run("gen-data", "--out", tmp_path / "d", "--n-clips", 2) == 0
