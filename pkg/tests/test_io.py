"""PNG planes, probability maps and patch manifests."""

import json

import numpy as np
import pytest
from PIL import Image

from neurocell.errors import FormatError
from neurocell.imaging import GREEN, RED, MultiChannelImage, Patch
from neurocell.io import (
    list_scenes,
    read_patch_set,
    read_plane,
    read_probability_map,
    read_raw_plane,
    read_scene,
    write_patch_set,
    write_plane,
    write_probability_map,
    write_scene,
)


def test_plane_round_trip(tmp_path):
    plane = np.random.default_rng(0).uniform(size=(9, 7))
    write_plane(tmp_path / "p.png", plane)
    back = read_plane(tmp_path / "p.png")
    assert back.shape == plane.shape
    assert np.abs(back - plane).max() <= 0.5 / 65535 + 1e-12


def test_reads_8bit_images(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    Image.fromarray(arr).save(tmp_path / "a.png")
    np.testing.assert_array_equal(read_raw_plane(tmp_path / "a.png"), arr)


def test_rejects_colour_and_garbage(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "c.png")
    with pytest.raises(FormatError):
        read_raw_plane(tmp_path / "c.png")
    (tmp_path / "g.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        read_raw_plane(tmp_path / "g.png")


def test_scene_pairing(tmp_path):
    img = MultiChannelImage({RED: np.full((4, 4), 0.5), GREEN: np.zeros((4, 4))})
    write_scene(tmp_path, "s1", img)
    write_scene(tmp_path, "s0", img)
    write_plane(tmp_path / f"lonely_{RED}.png", np.zeros((4, 4)))
    assert list_scenes(tmp_path) == ["s0", "s1"]
    raw = read_scene(tmp_path, "s1")
    assert raw[RED].max() == 32768
    with pytest.raises(FileNotFoundError):
        read_scene(tmp_path, "lonely")


def test_probability_sidecar(tmp_path):
    prob = np.linspace(0, 1, 20).reshape(4, 5)
    write_probability_map(tmp_path / "m.png", prob, {"scene": "x"})
    back, meta = read_probability_map(tmp_path / "m.png")
    np.testing.assert_allclose(back, prob, atol=1e-5)
    assert meta["scene"] == "x" and meta["scale"] == 65535
    meta["height"] = 99
    (tmp_path / "m.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="sidecar"):
        read_probability_map(tmp_path / "m.png")


def test_patch_set_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    patches = [Patch(rng.uniform(size=(3, 5, 5)), (1.5, 2.25), "sceneA", lab) for lab in (0, 2, None)]
    manifest = write_patch_set(tmp_path / "patches", patches)
    lines = manifest.read_text().splitlines()
    assert lines[0].split("\t") == ["path", "scene", "row", "col", "label"]
    assert lines[2].split("\t")[-1] == "Inhibitory" and lines[3].split("\t")[-1] == "-"
    back = read_patch_set(manifest)
    assert [p.label for p in back] == [0, 2, None]
    for a, b in zip(patches, back):
        assert a.centroid == b.centroid and b.source_id == "sceneA"
        assert np.abs(a.data - b.data).max() < 1e-4


def test_bad_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\n")
    with pytest.raises(FormatError, match="header"):
        read_patch_set(tmp_path / "m.tsv")
    with pytest.raises(FileNotFoundError):
        read_patch_set(tmp_path / "missing.tsv")
