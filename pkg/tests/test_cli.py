"""CLI tests: subcommand behavior, exit codes, config-file precedence."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from maskforge.cli import (
    _bool_value,
    _grid_arg,
    _scale_arg,
    _size_arg,
    build_configs,
    main,
    parse_config_file,
)
from maskforge.ingestion import DatasetManifest, load_mask
from maskforge.training import Checkpoint

WHITE = 255


def run(argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# argument parsing helpers


def test_size_and_scale_args():
    assert _size_arg("24") == (24, 24)
    assert _size_arg("24x32") == (24, 32)
    assert _scale_arg("1.5") == (1.5, 1.5)
    assert _scale_arg("1.5,2.0") == (1.5, 2.0)
    assert _grid_arg("3x5") == (3, 5)
    assert _bool_value("Yes") is True and _bool_value("0") is False
    import argparse

    for fn, bad in ((_size_arg, "abc"), (_scale_arg, "a,b"), (_grid_arg, "3")):
        with pytest.raises(argparse.ArgumentTypeError):
            fn(bad)
    with pytest.raises(ValueError):
        _bool_value("maybe")


# ---------------------------------------------------------------------------
# config files


def test_parse_config_file(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "# schedule\n"
        "learning_rate = 0.05\n"
        "max_epochs: 7\n"
        "\n"
        "model_channels = 8  # embedding width\n"
    )
    got = parse_config_file(cfg)
    assert got == {"learning_rate": "0.05", "max_epochs": "7", "model_channels": "8"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        parse_config_file(bad)
    with pytest.raises(FileNotFoundError):
        parse_config_file(tmp_path / "missing.cfg")


def test_build_configs_precedence():
    file_values = {
        "learning_rate": "0.05",
        "max_epochs": "7",
        "model_channels": "8",
        "model_tie_encoders": "true",
        "model_grid": "3x5",
    }
    tc, mc = build_configs(file_values, {"learning_rate": 0.02, "model_channels": 4})
    assert tc.learning_rate == 0.02   # CLI flag wins
    assert tc.max_epochs == 7         # file value survives
    assert tc.momentum == 0.9         # untouched default
    assert mc.channels == 4
    assert mc.tie_encoders is True
    assert mc.grid == (3, 5)
    with pytest.raises(ValueError, match="unknown config key"):
        build_configs({"learnin_rate": "0.1"}, {})
    # None overrides are "flag not given", not "set to None"
    tc2, _ = build_configs({}, {"learning_rate": None})
    assert tc2.learning_rate == 0.01


# ---------------------------------------------------------------------------
# synth + pair


def test_synth_deterministic_across_invocations(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["synth", "--out", out, "--n", 3, "--size", "24", "--seed", 5]) == 0
    names = sorted(p.name for p in a.glob("*.png"))
    assert len(names) == 9  # 3 pairs x (orig, tamp, mask)
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    man = DatasetManifest.load(a / "manifest.jsonl")
    assert len(man) == 3 and all(r.split == "test" for r in man.records)


def test_synth_requires_counts(tmp_path, capsys):
    assert run(["synth", "--out", tmp_path / "x"]) == 1
    assert "nothing to generate" in capsys.readouterr().err


def test_pair_scans_synth_output(tmp_path, capsys):
    src = tmp_path / "data"
    assert run(["synth", "--out", src, "--n", 2, "--size", "16"]) == 0
    out = tmp_path / "scanned.jsonl"
    assert run(["pair", "--root", src, "--out", out, "--split", "test"]) == 0
    man = DatasetManifest.load(out)
    assert [r.pair_id for r in man.records] == ["pair0000", "pair0001"]
    assert all(r.mask_path for r in man.records)
    assert "wrote 2 pairs" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# full pipeline: synth -> train -> generate -> filter -> eval -> plot


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert run(["synth", "--out", data, "--train", 2, "--val", 1, "--test", 2,
                "--size", 16, "--seed", 3]) == 0
    cfg = root / "train.cfg"
    cfg.write_text(
        "max_epochs = 1\n"
        "batch_size = 2\n"
        "lambda_mmd = 0.01\n"
        "r_min = 1.0\n"
        "r_max = 1.5\n"
        "model_channels = 16\n"
        "model_decoder_hidden = 8\n"
    )
    ckpt = root / "model.pt"
    log = root / "log.jsonl"
    rc = run(["train", "--manifest", data / "manifest.jsonl", "--out", ckpt,
              "--config", cfg, "--log", log, "--channels", 4, "--seed", 0])
    assert rc == 0
    masks = root / "masks"
    rc = run(["generate", "--ckpt", ckpt, "--manifest", data / "manifest.jsonl",
              "--out", masks, "--split", "test", "--baseline"])
    assert rc == 0
    return {"root": root, "data": data, "ckpt": ckpt, "log": log, "masks": masks}


def test_pipeline_train_artifacts(pipeline):
    ck = Checkpoint.load(pipeline["ckpt"])
    assert ck.model_config.channels == 4        # CLI --channels beats the file
    assert ck.model_config.decoder_hidden == 8  # file key applied
    assert ck.train_config.max_epochs == 1
    assert ck.train_config.batch_size == 2
    rows = [json.loads(l) for l in pipeline["log"].read_text().splitlines()]
    assert len(rows) == 1
    assert set(rows[0]) == {"epoch", "ce", "mmd", "val_f1", "lr"}


def test_pipeline_generate_masks(pipeline):
    masks = pipeline["masks"]
    files = sorted(p.name for p in masks.iterdir())
    assert files == ["pair0003_baseline.png", "pair0003_mask.png",
                     "pair0004_baseline.png", "pair0004_mask.png"]
    for f in files:
        m = load_mask(masks / f)  # validates {0, 255} content
        assert m.shape == (16, 16)


def test_pipeline_filter_report(pipeline, tmp_path, capsys):
    out = tmp_path / "filter.jsonl"
    assert run(["filter", "--masks", pipeline["masks"], "--out", out]) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert [r["pair_id"] for r in rows] == ["pair0003", "pair0004"]
    for r in rows:
        assert set(r) == {"pair_id", "valid", "fraction", "reason"}
        assert isinstance(r["valid"], bool)
        assert 0.0 <= r["fraction"] <= 1.0
        if r["valid"]:
            assert r["reason"] is None
        else:
            assert r["reason"] in ("too_white", "too_empty")
    assert "filtered 2 masks" in capsys.readouterr().out


def test_pipeline_eval_report(pipeline, tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = run(["eval", "--manifest", pipeline["data"] / "manifest.jsonl",
              "--pred", pipeline["masks"], "--split", "test", "--out", out])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "maskforge-report/1"
    assert doc["split"] == "test"
    counts = doc["counts"]
    assert all(isinstance(counts[k], int) for k in ("tp", "fp", "fn", "tn"))
    assert sum(counts.values()) == 2 * 16 * 16
    for key in ("precision", "recall", "f1", "iou", "accuracy"):
        assert 0.0 <= doc[key] <= 1.0
    assert len(doc["per_image"]) == 2
    assert "f1=" in capsys.readouterr().out


def test_pipeline_plot_panels(pipeline, tmp_path):
    out = tmp_path / "panels"
    rc = run(["plot", "--manifest", pipeline["data"] / "manifest.jsonl",
              "--pred", pipeline["masks"], "--split", "test", "--out", out])
    assert rc == 0
    panels = sorted(out.iterdir())
    assert [p.name for p in panels] == ["pair0003_panel.png", "pair0004_panel.png"]
    img = np.asarray(Image.open(panels[0]))
    # 4 panels of 16px separated by 3 white 2px gutters
    assert img.shape == (16, 4 * 16 + 3 * 2, 3)
    assert (img[:, 16:18] == 255).all()


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_2():
    for argv in ([], ["bogus"], ["synth"], ["train", "--manifest", "m"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run(["pair", "--root", tmp_path / "nowhere", "--out", tmp_path / "m"]) == 1
    assert "error:" in capsys.readouterr().err
    assert run(["filter", "--masks", tmp_path, "--out", tmp_path / "f"]) == 1
    (tmp_path / "junk_mask.png").write_bytes(b"not a png")
    assert run(["filter", "--masks", tmp_path, "--out", tmp_path / "f"]) == 1


def test_eval_missing_prediction_exits_1(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--out", data, "--n", 1, "--size", 16]) == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = run(["eval", "--manifest", data / "manifest.jsonl", "--pred", empty,
              "--out", tmp_path / "r.json"])
    assert rc == 1
    assert "missing prediction" in capsys.readouterr().err


def test_module_entrypoint_subprocess(tmp_path):
    res = subprocess.run([sys.executable, "-m", "maskforge.cli", "--help"],
                         capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert "maskforge" in res.stdout
    res = subprocess.run([sys.executable, "-m", "maskforge.cli", "synth"],
                         capture_output=True, text=True, timeout=120)
    assert res.returncode == 2  # missing required --out
