"""Command-line front end: exit codes, configuration and stage artifacts."""

import json

import numpy as np
import pytest

from neurocell import pipeline
from neurocell.cli import main
from neurocell.errors import ConfigError
from neurocell.imaging import GREEN, RED, MultiChannelImage
from neurocell.io import read_patch_set, read_plane, write_probability_map
from neurocell.netgraph import build_residual_classifier, build_unet, derive_rng, save_weights

SMALL = {
    "synth": {"n_train": 2, "n_test": 1, "height": 48, "width": 48, "n_cells": 5, "radius_range": [3, 4]},
    "imaging": {"patch_size": 15, "target_size": 15, "tile": 48},
    "network": {"depth": 2, "seg_base_channels": 2, "base_channels": 4},
    "training": {"epochs": 1, "iters": 2, "cls_epochs": 1, "k": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def run(*args):
    return main(list(args))


def test_unknown_subcommand(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config(workdir, capsys):
    assert run("synth", "--config", "nope.json") == 2
    assert "nope.json" in capsys.readouterr().err


def test_invalid_value_names_field(workdir, capsys):
    assert run("synth", "--config", "cfg.json", "--tau", "2") == 2
    assert "imaging.tau" in capsys.readouterr().err
    assert run("synth", "--unknown-flag", "1") == 2
    assert "--unknown-flag" in capsys.readouterr().err


def test_config_precedence(workdir):
    cfg = pipeline.merge_config({"imaging": {"tau": 0.8}}, {"tau": 0.6})
    assert cfg["imaging"]["tau"] == 0.6
    assert pipeline.merge_config({"imaging": {"tau": 0.8}})["imaging"]["tau"] == 0.8
    assert pipeline.merge_config()["imaging"]["tau"] == 0.7
    with pytest.raises(ConfigError, match="synth.class_mix"):
        pipeline.merge_config({"synth": {"class_mix": [0.5, 0.5, 0.5]}})
    with pytest.raises(ConfigError, match="section"):
        pipeline.merge_config({"bogus": {}})


def test_config_hash_ignores_paths():
    a = pipeline.merge_config({"paths": {"data_dir": "x"}})
    b = pipeline.merge_config({"paths": {"data_dir": "y"}})
    assert pipeline.config_hash(a) == pipeline.config_hash(b)
    assert pipeline.config_hash(a) != pipeline.config_hash(pipeline.merge_config(overrides={"seed": 1}))


def test_missing_weights(workdir, capsys):
    assert run("synth", "--config", "cfg.json") == 0
    assert run("segment", "--config", "cfg.json") == 2
    assert "segmenter.ncw" in capsys.readouterr().err


def test_contract_violation_exit_3(workdir):
    assert run("synth", "--config", "cfg.json") == 0
    (workdir / "models").mkdir()
    # a classifier stored where the segmenter belongs expects 3 input channels
    save_weights(build_residual_classifier([1], 4, 3), workdir / "models" / "segmenter.ncw")
    assert run("segment", "--config", "cfg.json") == 3


def test_synth_truth_then_extract_counts_cells(workdir):
    assert run("synth", "--config", "cfg.json", "--n-train", "1", "--n-test", "0") == 0
    scenes = workdir / "data" / "scenes" / "train"
    truth = json.loads((scenes / "train0000_truth.json").read_text())
    assert len(truth["cells"]) == 5
    # stub segmenter: the ground-truth map itself
    prob_dir = workdir / "data" / "probability" / "train"
    prob_dir.mkdir(parents=True)
    write_probability_map(prob_dir / "train0000.png", read_plane(scenes / "train0000_truth.png"))
    inputs = {p: p.read_bytes() for p in scenes.iterdir()}
    assert run("extract", "--config", "cfg.json") == 0
    patches = read_patch_set(workdir / "data" / "patches" / "manifest.tsv")
    assert len(patches) == 5
    assert sorted(p.label for p in patches) == sorted(
        {"Excitatory": 0, "Glial": 1, "Inhibitory": 2}[c["class"]] for c in truth["cells"]
    )
    assert all(p.read_bytes() == data for p, data in inputs.items())


def test_stage_reports_carry_seed_and_hash(workdir):
    assert run("synth", "--config", "cfg.json", "--seed", "5") == 0
    assert run("train-seg", "--config", "cfg.json", "--seed", "5") == 0
    report = json.loads((workdir / "reports" / "train_seg.json").read_text())
    assert report["seed"] == 5 and len(report["config_hash"]) == 16
    assert len(report["loss_curve"]) == 1


def test_gradcheck_subcommand(capsys):
    assert run("gradcheck", "--gradcheck-seeds", "1") == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "unet" in out and "FAIL" not in out


def test_classify_cells_blank_scene():
    seg = build_unet(2, 2, rng=derive_rng(0, "blank"))
    seg.nodes[-3].params["bias"].data[...] = -20.0  # confident background everywhere
    cls = build_residual_classifier([1], 4, 3)
    blank = MultiChannelImage({RED: np.zeros((32, 32)), GREEN: np.zeros((32, 32))})
    assert pipeline.classify_cells(seg, cls, blank, tile=32, patch_size=9, target_size=9) == []


def test_classify_cells_records():
    seg = build_unet(2, 2, rng=derive_rng(0, "blob"))
    seg.nodes[-3].params["weight"].data[...] = 0.0
    seg.nodes[-3].params["bias"].data[...] = 20.0  # everything foreground: one component
    cls = build_residual_classifier([1], 4, 3)
    img = MultiChannelImage({RED: np.random.default_rng(0).uniform(size=(16, 16)), GREEN: np.ones((16, 16))})
    records = pipeline.classify_cells(seg, cls, img, tile=16, patch_size=9, target_size=9)
    assert len(records) == 1
    r = records[0]
    assert r["size"] == 256 and r["centroid"] == [7.5, 7.5]
    assert sum(r["probabilities"]) == pytest.approx(1.0, abs=1e-6)
    assert r["class"] in ("Excitatory", "Glial", "Inhibitory")
