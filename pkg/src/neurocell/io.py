"""On-disk formats: channel PNG pairs, probability maps with sidecars, patch sets.

* channels: ``<scene>_mCherry.png`` / ``<scene>_GCaMP.png`` (8- or 16-bit grayscale)
* probability maps: 16-bit PNG scaled by 65535 plus ``<stem>.json`` metadata
* patches: ``<stem>_R.png``, ``<stem>_G.png``, ``<stem>_B.png`` (16-bit) listed in a
  tab-separated manifest ``path, scene, row, col, label``
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError
from .imaging import GREEN, RED, MultiChannelImage, Patch

PROB_SCALE = 65535
MANIFEST_HEADER = ("path", "scene", "row", "col", "label")
_CHANNEL_SUFFIX = ("R", "G", "B")


def write_plane(path, plane: np.ndarray) -> None:
    """Store a [0, 1] plane as a 16-bit PNG."""
    q = np.rint(np.clip(plane, 0.0, 1.0) * PROB_SCALE).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_raw_plane(path) -> np.ndarray:
    """Raw integer intensities of a grayscale PNG as float64."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.float64)


def read_plane(path) -> np.ndarray:
    """Plane written by :func:`write_plane`, rescaled back to [0, 1]."""
    return read_raw_plane(path) / PROB_SCALE


def scene_paths(directory, scene: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{scene}_{RED}.png", d / f"{scene}_{GREEN}.png"


def list_scenes(directory) -> list[str]:
    """Scene ids that have both channel files, sorted."""
    d = Path(directory)
    suffix = f"_{RED}.png"
    out = []
    for p in sorted(d.glob(f"*{suffix}")):
        scene = p.name[: -len(suffix)]
        if scene_paths(d, scene)[1].exists():
            out.append(scene)
    return out


def read_scene(directory, scene: str) -> MultiChannelImage:
    red, green = scene_paths(directory, scene)
    for p in (red, green):
        if not p.exists():
            raise FileNotFoundError(p)
    return MultiChannelImage({RED: read_raw_plane(red), GREEN: read_raw_plane(green)})


def write_scene(directory, scene: str, image: MultiChannelImage) -> None:
    red, green = scene_paths(directory, scene)
    write_plane(red, image[RED])
    write_plane(green, image[GREEN])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_probability_map(path, prob: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    write_plane(path, prob)
    sidecar = {"height": int(prob.shape[0]), "width": int(prob.shape[1]), "scale": PROB_SCALE, **(meta or {})}
    write_json(path.with_suffix(".json"), sidecar)


def read_probability_map(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    prob = read_plane(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if meta and (meta.get("height"), meta.get("width")) != prob.shape:
        raise FormatError(f"{side}: sidecar shape disagrees with {path.name} {prob.shape}")
    return prob, meta


def _label_text(label) -> str:
    from .trainer import CellClass

    return "-" if label is None else CellClass(int(label)).label


def _parse_label(text: str):
    from .trainer import CellClass

    return None if text in ("-", "") else int(CellClass.parse(text))


def write_patch_set(directory, patches: list[Patch], manifest: str = "manifest.tsv", names: list[str] | None = None) -> Path:
    """Write PNG triplets plus a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_HEADER)]
    for i, p in enumerate(patches):
        stem = names[i] if names else f"patch{i:05d}"
        for ch, suffix in enumerate(_CHANNEL_SUFFIX):
            write_plane(d / f"{stem}_{suffix}.png", p.data[ch])
        lines.append("\t".join([stem, p.source_id, repr(float(p.centroid[0])), repr(float(p.centroid[1])), _label_text(p.label)]))
    path = d / manifest
    path.write_text("\n".join(lines) + "\n")
    return path


def read_patch_set(manifest_path) -> list[Patch]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    rows = [ln.split("\t") for ln in manifest_path.read_text().splitlines() if ln.strip()]
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise FormatError(f"{manifest_path}: missing manifest header {MANIFEST_HEADER}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError(f"{manifest_path}:{n}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        stem, scene, r, c, label = row
        try:
            data = np.stack([read_plane(manifest_path.parent / f"{stem}_{s}.png") for s in _CHANNEL_SUFFIX])
            out.append(Patch(data, (float(r), float(c)), scene, _parse_label(label)))
        except (ValueError, ConfigError) as exc:
            raise FormatError(f"{manifest_path}:{n}: {exc}") from exc
    return out
