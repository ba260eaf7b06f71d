import argparse
import json

import numpy as np
import pytest

from tsqueeze.cli import build_parser, main
from tsqueeze.data import SyntheticSpec, generate, save_video_frames, write_dataset
from tsqueeze.tensor import load_tensor, save_tensor


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def clip_dir(tmp_path):
    frames = np.random.default_rng(0).uniform(size=(10, 8, 8, 1))
    path = tmp_path / "clip"
    save_video_frames(frames, str(path))
    return path


def test_config_is_printed_first(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    first = out.splitlines()[0]
    assert first.startswith("config: ")
    assert json.loads(first[len("config: "):])["target"] == "ts"


def test_gradcheck_ts_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--k", 4, "--d", 2)
    assert code == 0
    assert out.strip().splitlines()[-1] == "PASS"
    assert any(line.startswith("w2") for line in out.splitlines())


def test_gradcheck_network_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "network", "--instances", 2)
    assert code == 0 and out.strip().endswith("PASS")


def test_gradcheck_fails_on_impossible_tolerance(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tol", 1e-30)
    assert code == 1 and out.strip().endswith("FAIL")


def test_squeeze_d_larger_than_k(capsys, clip_dir, tmp_path):
    code, _, err = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 11, "--out", tmp_path / "o")
    assert code == 1
    assert err.startswith("error: config:")
    assert len(err.strip().splitlines()) == 1


def test_squeeze_too_few_frames(capsys, clip_dir, tmp_path):
    code, _, err = run(capsys, "squeeze", "--frames", clip_dir, "--k", 12, "--d", 2, "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error: data:")


def test_squeeze_missing_frames(capsys, tmp_path):
    code, _, err = run(capsys, "squeeze", "--frames", tmp_path / "nope", "--k", 2, "--d", 1, "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error: io:")


def test_squeeze_outputs(capsys, clip_dir, tmp_path):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", out)
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["images"] == ["frame_00000.png", "frame_00001.png"]
    assert report["residual"] >= 0
    assert load_tensor(out / "squeezed.tsq").shape == (2, 8, 8, 1)
    assert (out / "normalization.txt").exists()


def test_squeeze_with_weights_reproduces_output(capsys, clip_dir, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", first,
        "--optimize-steps", 5, "--precision", "f64")
    code, _, _ = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", second,
                     "--weights", first / "ts_params.tsqp", "--precision", "f64")
    assert code == 0
    assert (first / "squeezed.tsq").read_bytes() == (second / "squeezed.tsq").read_bytes()


def test_squeeze_bad_weights(capsys, clip_dir, tmp_path):
    (tmp_path / "w.bin").write_bytes(b"junk")
    code, _, err = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2,
                       "--out", tmp_path / "o", "--weights", tmp_path / "w.bin")
    assert code == 1 and err.startswith("error: config:")
    good = tmp_path / "good"
    run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", good)
    code, _, err = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 3,
                       "--out", tmp_path / "o", "--weights", good / "ts_params.tsqp")
    assert code == 1 and err.startswith("error: config:")


def test_squeeze_accepts_tsq1_clip(capsys, tmp_path):
    save_tensor(tmp_path / "clip.tsq", np.random.default_rng(1).uniform(size=(6, 4, 4, 3)))
    code, _, _ = run(capsys, "squeeze", "--frames", tmp_path / "clip.tsq", "--k", 6, "--d", 3,
                     "--out", tmp_path / "o")
    assert code == 0
    assert load_tensor(tmp_path / "o" / "squeezed.tsq").shape == (3, 4, 4, 3)


def test_squeeze_is_bit_identical(capsys, clip_dir, tmp_path):
    for name in ("a", "b"):
        run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", tmp_path / name,
            "--optimize-steps", 20)
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_precision_env_var(capsys, clip_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("TSQ_PRECISION", "f64")
    run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", tmp_path / "o")
    assert load_tensor(tmp_path / "o" / "squeezed.tsq").dtype == np.float64
    monkeypatch.setenv("TSQ_PRECISION", "f32")
    run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", tmp_path / "p")
    assert load_tensor(tmp_path / "p" / "squeezed.tsq").dtype == np.float32
    monkeypatch.setenv("TSQ_PRECISION", "f16")
    code, _, err = run(capsys, "squeeze", "--frames", clip_dir, "--k", 10, "--d", 2, "--out", tmp_path / "q")
    assert code == 1 and err.startswith("error: config:")


def test_eval_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.tsqc")
    assert code != 0
    assert err.startswith("error: config:")


def test_train_with_two_layer_config(capsys, tmp_path):
    spec = SyntheticSpec(num_classes=4, frames_per_video=10, height=16, width=16, channels=3, seed=0)
    manifest = write_dataset(generate(spec, 3), str(tmp_path / "data"))
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", "ts_conv1_d3_conv4_d1", "--manifest", manifest,
                          "--out", out, "--epochs", 1, "--eval-clips", 1, "--batch-size", 4)
    assert code == 0, stdout
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,classif,proj_1,proj_2,l2,total,val_acc,lr"
    assert (out / "checkpoint.tsqc").exists()
    assert set(json.loads((out / "split.json").read_text())) == {"train", "test"}


def test_train_eval_fuse_roundtrip(capsys, tmp_path):
    cfg = {"k": 4, "num_classes": 2, "ts_placements": [[0, 2]], "conv_blocks": [[4, 3, 2]]}
    (tmp_path / "net.json").write_text(json.dumps(cfg))
    data = ["--classes", 2, "--videos-per-class", 5, "--frames", 4, "--height", 8, "--width", 8]
    code, _, _ = run(capsys, "train", "--config", tmp_path / "net.json", "--out", tmp_path / "run",
                     "--epochs", 1, "--eval-clips", 1, *data)
    assert code == 0
    ck = tmp_path / "run" / "checkpoint.tsqc"
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--split", "test", "--clips", 1,
                       "--scores-out", tmp_path / "s.csv", *data)
    assert code == 0 and "accuracy" in out
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "id,label,pred,score_0,score_1"
    assert len(rows) == 1 + 2
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--split", "test", "--clips", 1,
                       "--fuse-scores", tmp_path / "s.csv", *data)
    assert code == 0
    lines = out.splitlines()
    acc = lines[1].split()[1]
    # fusing a stream with itself leaves the prediction unchanged
    assert lines[2] == f"fused_accuracy {acc}"


def test_gen_data(capsys, tmp_path):
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--videos-per-class", 2,
                     "--frames", 3, "--height", 6, "--width", 6)
    assert code == 0
    entries = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(entries) == 4
    assert (tmp_path / "d" / entries[0]["path"] / "frame_00002.png").exists()


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gradcheck", "--bogus"])
    assert info.value.code == 2


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


@pytest.mark.parametrize("command", ["squeeze", "train", "eval", "gradcheck", "gen-data"])
def test_help_lists_every_flag_with_default(capsys, command):
    sub = _subparsers(build_parser())[command]
    with pytest.raises(SystemExit):
        main([command, "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for action in sub._actions:
        if not action.option_strings or action.dest == "help":
            continue
        assert action.option_strings[-1] in text
        if not action.required and action.default is not None:
            assert f"(default: {action.default})" in text, action.dest
