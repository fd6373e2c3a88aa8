import json

import numpy as np
import pytest

from plantxvit.cli import main
from plantxvit.data import encode_ppm, synth_dataset

TINY = ["--data", "synth:2:4:1", "--image-size", "16", "--patch-size", "2", "--depth", "1",
        "--epochs", "1", "--batch", "4", "--splits", "0.5,0.5,0", "--seed", "3"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *TINY, "--out", str(out)]) == 0
    return out


def strip_seconds(path):
    return [{k: v for k, v in json.loads(line).items() if k != "seconds"} for line in path.read_text().splitlines()]


def test_train_outputs(run_dir):
    for name in ("model.pxvt", "epochs.jsonl", "val_metrics.json", "config.ini", "confusion.csv", "roc.csv"):
        assert (run_dir / name).is_file(), name
    report = json.loads((run_dir / "val_metrics.json").read_text())
    assert {"loss", "accuracy", "precision", "recall", "f1", "auc", "kappa"} <= set(report)
    assert len(strip_seconds(run_dir / "epochs.jsonl")) == 1


def test_train_is_seed_reproducible(run_dir, tmp_path):
    assert main(["train", *TINY, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.pxvt").read_bytes() == (run_dir / "model.pxvt").read_bytes()
    assert strip_seconds(tmp_path / "epochs.jsonl") == strip_seconds(run_dir / "epochs.jsonl")
    assert (tmp_path / "val_metrics.json").read_text() == (run_dir / "val_metrics.json").read_text()


def test_eval(run_dir, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(run_dir / "model.pxvt"), "--split", "train",
                 "--out", str(tmp_path), "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert {"loss", "accuracy", "precision", "recall", "f1", "auc", "kappa"} <= set(report)
    assert (tmp_path / "metrics.json").is_file() and (tmp_path / "confusion.csv").is_file()
    assert (tmp_path / "roc.csv").is_file()


def test_eval_empty_split_is_data_error(run_dir, capsys):
    assert main(["eval", "--checkpoint", str(run_dir / "model.pxvt"), "--split", "test"]) == 2
    assert "empty" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "absent.pxvt"
    assert main(["eval", *TINY[:4], "--checkpoint", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.fixture(scope="module")
def image_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("img") / "leaf.ppm"
    path.write_bytes(encode_ppm(synth_dataset(2, 1, 16, seed=9).samples[0].pixels))
    return path


def test_explain_gradcam(run_dir, image_file, tmp_path, capsys):
    code = main(["explain", "--method", "gradcam", "--checkpoint", str(run_dir / "model.pxvt"),
                 "--image", str(image_file), "--class", "0", "--out", str(tmp_path), "--json"])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["layer"] == "inception" and len(result["peak"]) == 2
    assert (tmp_path / "gradcam.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_explain_lime_deterministic(run_dir, image_file, tmp_path):
    args = ["explain", "--method", "lime", "--checkpoint", str(run_dir / "model.pxvt"), "--image",
            str(image_file), "--grid", "4,4", "--samples", "40", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "lime.json").read_text(), (tmp_path / "b" / "lime.json").read_text()
    assert a == b and len(json.loads(a)["weights"]) == 16


def test_explain_unknown_method(capsys):
    assert main(["explain", "--method", "shap", "--image", "x.ppm"]) == 1
    assert "unknown method" in capsys.readouterr().err


def test_explain_missing_image(run_dir, tmp_path):
    assert main(["explain", "--method", "gradcam", "--checkpoint", str(run_dir / "model.pxvt"),
                 "--image", str(tmp_path / "none.ppm")]) == 2


def test_inspect_text(capsys):
    assert main(["inspect"]) == 0
    out = capsys.readouterr().out
    assert "488,772" in out and "850,500" in out and "56x56x512" in out


def test_inspect_json_reconciles(run_dir, capsys):
    assert main(["inspect", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert sum(r["params"] for r in rep["rows"]) == rep["total"]["achieved"]
    assert rep["checkpoint"]["bytes"] == rep["checkpoint"]["payload_bytes"] + rep["checkpoint"]["header_bytes"]
    assert main(["inspect", "--json", "--checkpoint", str(run_dir / "model.pxvt")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["checkpoint"]["file_bytes"] == rep["checkpoint"]["bytes"]


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text("[model]\ninput_size = 32\npatch_size = 2\n[train]\nlr = 0.001  # comment\n")
    assert main(["inspect", "--config", str(cfg), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["rows"][0]["output_shape"] == [32, 32, 3]
    assert main(["inspect", "--config", str(cfg), "--image-size", "16", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["rows"][0]["output_shape"] == [16, 16, 3]


@pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[extras]\na = 1\n", "[train]\nlr = fast\n",
                                  "[train]\noptimizer = lbfgs\n", "[model]\ninput_size = 30\n", "no header\n"])
def test_config_errors(tmp_path, text, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert main(["inspect", "--config", str(cfg)]) == 1
    assert "config error" in capsys.readouterr().err


def test_bad_flags_are_config_errors():
    assert main(["train", "--optimizer", "lbfgs"]) == 1
    assert main(["frobnicate"]) == 1


def test_bad_dataset_is_data_error(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.ppm").write_bytes(b"garbage")
    assert main(["train", "--data", str(tmp_path), "--image-size", "16", "--patch-size", "2"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing")]) == 2


def test_class_count_mismatch_is_data_error(tmp_path):
    assert main(["train", *TINY, "--num-classes", "5", "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_is_numeric_error(tmp_path, capsys):
    args = ["train", *TINY, "--optimizer", "sgd", "--lr", "1e30", "--epochs", "3", "--out", str(tmp_path)]
    assert main(args) == 3
    assert "numeric" in capsys.readouterr().err


def test_patch_sweep(tmp_path, capsys):
    args = ["train", *TINY, "--out", str(tmp_path), "--json"]
    args[args.index("--patch-size") + 1] = "1,2"
    assert main(args) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["patch_size"] for r in rows] == [1, 2]
    assert {"loss", "accuracy", "precision", "recall", "f1", "auc", "kappa"} <= set(rows[0])
    for p in (1, 2):
        assert (tmp_path / f"patch_{p}" / "val_metrics.json").is_file()
    assert json.loads((tmp_path / "sweep.json").read_text()) == rows


def test_init_checkpoint_prefix(run_dir, tmp_path):
    from plantxvit.model import read_tensors
    args = ["train", *TINY, "--epochs", "0", "--seed", "11", "--out", str(tmp_path),
            "--init-checkpoint", str(run_dir / "model.pxvt")]
    assert main(args) == 0
    src, dst = read_tensors(run_dir / "model.pxvt"), read_tensors(tmp_path / "model.pxvt")
    assert all(np.array_equal(src[k], dst[k]) for k in src if k.startswith("vgg_"))
    assert not np.array_equal(src["output/kernel"], dst["output/kernel"])
