"""Pipeline stages shared by the command-line front end.

Every stage takes a resolved configuration (nested dict of sections) and
reads/writes files under the configured directories. Randomness comes from
``training.seed`` through streams named after the stage.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import gradcheck
from .errors import ConfigError
from .imaging import (
    AugmentSpec,
    MultiChannelImage,
    compose_rgb,
    connected_components,
    extract_patch,
    filter_components,
    fuse_grayscale,
    normalize_image,
    resample_bilinear,
    threshold_map,
    tiled_inference,
)
from .io import (
    list_scenes,
    read_patch_set,
    read_plane,
    read_probability_map,
    read_scene,
    write_json,
    write_patch_set,
    write_plane,
    write_probability_map,
    write_scene,
)
from .netgraph import NetworkSpec, build_unet, derive_rng, load_weights, save_weights
from .synthdata import TAPER, SceneSpec, generate_scene, scene_seed
from .trainer import (
    CellClass,
    ClassifierConfig,
    ConfusionMatrix,
    CVSummary,
    ElasticSpec,
    confusion_csv,
    confusion_text,
    predict_classes,
    report_tables,
    run_cross_validation,
    segmentation_accuracy,
    train_classifier,
    train_segmentation,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "test")

DEFAULTS: dict[str, dict] = {
    "paths": {"data_dir": "data", "model_dir": "models", "report_dir": "reports"},
    "synth": {
        "n_train": 64,
        "n_test": 16,
        "height": 128,
        "width": 128,
        "n_cells": 10,
        "class_mix": [0.45, 0.45, 0.10],
        "radius_range": [4.0, 7.0],
        "noise_std": 0.03,
        "min_gap": 2.0,
    },
    "imaging": {
        "tau": 0.7,
        "agreement_tau": 0.5,
        "patch_size": 101,
        "target_size": 299,
        "min_size": 9,
        "tile": 128,
        "augment_factor": 1,
        "angle_range": [-30.0, 30.0],
        "scale_range": [0.9, 1.1],
    },
    "network": {
        "depth": 3,
        "seg_base_channels": 8,
        "family": "residual",
        "blocks_per_stage": [1, 1],
        "n_mixed_blocks": 2,
        "base_channels": 8,
        "freeze_point": "input",
        "pretrained": None,
    },
    "training": {
        "seed": 0,
        "epochs": 10,
        "iters": 1000,
        "batch": 1,
        "lr": 0.01,
        "momentum": 0.9,
        "elastic_alpha": 0.0,
        "elastic_grid": 16,
        "elastic_sigma": 4.0,
        "cls_epochs": 11,
        "cls_batch": 16,
        "cls_lr": 0.01,
        "k": 10,
        "epsilon": 0.5,
        "gradcheck_seeds": 20,
    },
}

# flag name -> section; every key is unique across sections
KEY_SECTION = {key: section for section, fields in DEFAULTS.items() for key in fields}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def merge_config(file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file's sections, then flat ``key -> value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, fields in (file_config or {}).items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(cfg)}")
        if not isinstance(fields, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in fields.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config field {section}.{key}")
            cfg[section][key] = value
    for key, value in (overrides or {}).items():
        if key not in KEY_SECTION:
            raise ConfigError(f"unknown option --{key.replace('_', '-')}")
        cfg[KEY_SECTION[key]][key] = value
    validate(cfg)
    return cfg


def _require(ok: bool, field: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"invalid config value {field}: {message}")


def _number(cfg, section, key, lo=None, hi=None, integer=False, lo_open=False):
    v = cfg[section][key]
    field = f"{section}.{key}"
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), field, f"expected a number, got {v!r}")
    if integer:
        _require(float(v).is_integer(), field, f"expected an integer, got {v!r}")
        cfg[section][key] = v = int(v)
    if lo is not None:
        _require(v > lo if lo_open else v >= lo, field, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None:
        _require(v <= hi, field, f"must be <= {hi}, got {v}")


def _pair(cfg, section, key):
    v = cfg[section][key]
    _require(
        isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v) and v[0] <= v[1],
        f"{section}.{key}",
        f"expected [low, high] with low <= high, got {v!r}",
    )


def validate(cfg: dict) -> None:
    for key, value in cfg["paths"].items():
        _require(isinstance(value, str) and value != "", f"paths.{key}", "expected a non-empty path")
    for key in ("n_train", "n_test", "n_cells"):
        _number(cfg, "synth", key, 0, integer=True)
    for key in ("height", "width"):
        _number(cfg, "synth", key, 8, integer=True)
    _number(cfg, "synth", "noise_std", 0)
    _number(cfg, "synth", "min_gap", 0)
    mix = cfg["synth"]["class_mix"]
    _require(
        isinstance(mix, (list, tuple)) and len(mix) == 3 and all(isinstance(p, (int, float)) and p >= 0 for p in mix)
        and abs(sum(mix) - 1.0) < 1e-9,
        "synth.class_mix",
        f"expected three non-negative weights summing to 1, got {mix!r}",
    )
    _pair(cfg, "synth", "radius_range")

    _number(cfg, "imaging", "tau", 0, 1)
    _number(cfg, "imaging", "agreement_tau", 0, 1)
    for key in ("patch_size", "target_size"):
        _number(cfg, "imaging", key, 1, integer=True)
    _require(cfg["imaging"]["patch_size"] % 2 == 1, "imaging.patch_size", "must be odd")
    _number(cfg, "imaging", "min_size", 1, integer=True)
    _number(cfg, "imaging", "tile", 1, integer=True)
    _number(cfg, "imaging", "augment_factor", 1, integer=True)
    _pair(cfg, "imaging", "angle_range")
    _pair(cfg, "imaging", "scale_range")
    _require(cfg["imaging"]["scale_range"][0] > 0, "imaging.scale_range", "scales must be positive")

    net = cfg["network"]
    _number(cfg, "network", "depth", 1, 6, integer=True)
    _number(cfg, "network", "seg_base_channels", 1, integer=True)
    _number(cfg, "network", "base_channels", 1, integer=True)
    _number(cfg, "network", "n_mixed_blocks", 1, integer=True)
    _require(net["family"] in ("residual", "inception"), "network.family", f"expected residual or inception, got {net['family']!r}")
    b = net["blocks_per_stage"]
    _require(
        isinstance(b, (list, tuple)) and len(b) > 0 and all(isinstance(x, int) and x >= 1 for x in b),
        "network.blocks_per_stage",
        f"expected a non-empty list of positive integers, got {b!r}",
    )
    _require(isinstance(net["freeze_point"], (int, str)), "network.freeze_point", "expected an index or a name")
    _require(net["pretrained"] is None or isinstance(net["pretrained"], str), "network.pretrained", "expected a path")

    _number(cfg, "training", "seed", 0, integer=True)
    for key in ("epochs", "cls_epochs"):
        _number(cfg, "training", key, 1, integer=True)
    for key in ("iters", "batch", "cls_batch", "gradcheck_seeds", "elastic_grid"):
        _number(cfg, "training", key, 1, integer=True)
    _number(cfg, "training", "k", 2, integer=True)
    for key in ("lr", "cls_lr"):
        _number(cfg, "training", key, 0, lo_open=True)
    _number(cfg, "training", "momentum", 0, 1)
    _require(cfg["training"]["momentum"] < 1, "training.momentum", "must be < 1")
    for key in ("elastic_alpha", "elastic_sigma", "epsilon"):
        _number(cfg, "training", key, 0)


def config_hash(cfg: dict) -> str:
    """Digest of every setting that affects results (directory locations excluded)."""
    payload = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _meta(cfg: dict) -> dict:
    return {"seed": cfg["training"]["seed"], "config_hash": config_hash(cfg)}


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


class Layout:
    def __init__(self, cfg: dict):
        p = cfg["paths"]
        self.data = Path(p["data_dir"])
        self.models = Path(p["model_dir"])
        self.reports = Path(p["report_dir"])

    def scenes(self, split: str) -> Path:
        return self.data / "scenes" / split

    def probability(self, split: str) -> Path:
        return self.data / "probability" / split

    @property
    def patches(self) -> Path:
        return self.data / "patches"

    @property
    def manifest(self) -> Path:
        return self.patches / "manifest.tsv"

    @property
    def segmenter(self) -> Path:
        return self.models / "segmenter.ncw"

    @property
    def classifier(self) -> Path:
        return self.models / "classifier.ncw"

    @property
    def cv_report(self) -> Path:
        return self.reports / "cross_validation.json"


def _require_path(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _scene_ids(directory: Path) -> list[str]:
    ids = list_scenes(_require_path(directory))
    if not ids:
        raise FileNotFoundError(directory / "*_mCherry.png")
    return ids


def _truth_path(directory: Path, scene: str) -> tuple[Path, Path]:
    return directory / f"{scene}_truth.png", directory / f"{scene}_truth.json"


def _read_truth(directory: Path, scene: str) -> dict | None:
    path = _truth_path(directory, scene)[1]
    return json.loads(path.read_text()) if path.exists() else None


def scene_spec(cfg: dict) -> SceneSpec:
    s = cfg["synth"]
    return SceneSpec(
        height=s["height"],
        width=s["width"],
        n_cells=s["n_cells"],
        class_mix=tuple(s["class_mix"]),
        radius_range=tuple(s["radius_range"]),
        noise_std=s["noise_std"],
        min_gap=s["min_gap"],
        seed=cfg["training"]["seed"],
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def synth(cfg: dict) -> dict:
    """Render train and test scenes with their ground truth."""
    lay = Layout(cfg)
    spec = scene_spec(cfg)
    seed = cfg["training"]["seed"]
    counts = {}
    offset = 0
    for split in SPLITS:
        n = cfg["synth"][f"n_{split}"]
        d = lay.scenes(split)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            scene = f"{split}{i:04d}"
            image, truth = generate_scene(spec, scene_seed(seed, offset + i))
            write_scene(d, scene, image)
            prob_path, json_path = _truth_path(d, scene)
            write_plane(prob_path, truth.probability)
            cells = [
                {"center": list(c.center), "radius": c.radius, "class": c.cell_class.label, "levels": list(c.levels)}
                for c in truth.cells
            ]
            write_json(json_path, {"scene": scene, "cells": cells})
        counts[split] = n
        offset += n
    return {**_meta(cfg), "scenes": counts}


def _grayscale(image: MultiChannelImage) -> np.ndarray:
    return fuse_grayscale(normalize_image(image))


def train_seg(cfg: dict) -> dict:
    lay = Layout(cfg)
    d = lay.scenes("train")
    pairs = []
    for scene in _scene_ids(d):
        target = read_plane(_require_path(_truth_path(d, scene)[0]))
        pairs.append((_grayscale(read_scene(d, scene)), target))
    seed, net, tr = cfg["training"]["seed"], cfg["network"], cfg["training"]
    spec = build_unet(net["depth"], net["seg_base_channels"], 1, 1, rng=derive_rng(seed, "train-seg", "init"))
    elastic = None
    if tr["elastic_alpha"] > 0:
        elastic = ElasticSpec(tr["elastic_grid"], tr["elastic_sigma"], tr["elastic_alpha"])
    _, curve = train_segmentation(
        spec, pairs, tr["epochs"], tr["iters"], tr["batch"], tr["lr"], derive_rng(seed, "train-seg"),
        tr["momentum"], elastic,
    )
    lay.models.mkdir(parents=True, exist_ok=True)
    save_weights(spec, lay.segmenter)
    report = {**_meta(cfg), "scenes": len(pairs), "loss_curve": curve}
    lay.reports.mkdir(parents=True, exist_ok=True)
    write_json(lay.reports / "train_seg.json", report)
    return report


def _load_model(path: Path) -> NetworkSpec:
    return load_weights(_require_path(path))


def segment(cfg: dict) -> dict:
    """Probability maps for every scene of every split."""
    lay = Layout(cfg)
    spec = _load_model(lay.segmenter)
    written = {}
    for split in SPLITS:
        src = lay.scenes(split)
        if not src.exists():
            continue
        out = lay.probability(split)
        out.mkdir(parents=True, exist_ok=True)
        ids = list_scenes(src)
        for scene in ids:
            prob = tiled_inference(spec, _grayscale(read_scene(src, scene)), cfg["imaging"]["tile"])
            write_probability_map(out / f"{scene}.png", prob, {"scene": scene, **_meta(cfg)})
        written[split] = len(ids)
    if not written:
        raise FileNotFoundError(lay.scenes("train"))
    return {**_meta(cfg), "maps": written}


def detect(prob: np.ndarray, tau: float, min_size: int):
    """Connected components of the thresholded map that reach ``min_size`` pixels."""
    _, comps = connected_components(threshold_map(prob, tau), 8)
    return filter_components(comps, min_size)


def _match_label(truth: dict | None, centroid) -> int | None:
    if not truth or not truth["cells"]:
        return None
    dist = [np.hypot(centroid[0] - c["center"][0], centroid[1] - c["center"][1]) for c in truth["cells"]]
    i = int(np.argmin(dist))
    cell = truth["cells"][i]
    return int(CellClass.parse(cell["class"])) if dist[i] <= cell["radius"] + TAPER else None


def _cut(rgb: np.ndarray, centroid, cfg: dict, scene: str, label=None):
    im = cfg["imaging"]
    p = extract_patch(rgb, centroid, im["patch_size"], scene, label)
    return resample_bilinear(p, im["target_size"]) if im["target_size"] != im["patch_size"] else p


def extract(cfg: dict) -> dict:
    """Patches around every detected component, labelled from ground truth when available."""
    lay = Layout(cfg)
    im = cfg["imaging"]
    patches, names, per_scene = [], [], {}
    for split in SPLITS:
        prob_dir, scene_dir = lay.probability(split), lay.scenes(split)
        if not prob_dir.exists():
            continue
        for path in sorted(prob_dir.glob("*.png")):
            scene = path.stem
            prob, _ = read_probability_map(path)
            rgb = compose_rgb(normalize_image(read_scene(scene_dir, scene)))
            truth = _read_truth(scene_dir, scene)
            comps = detect(prob, im["tau"], im["min_size"])
            for j, comp in enumerate(comps):
                patches.append(_cut(rgb, comp.centroid, cfg, scene, _match_label(truth, comp.centroid)))
                names.append(f"{scene}_c{j:03d}")
            per_scene[scene] = {"components": len(comps), "cells": len(truth["cells"]) if truth else None}
    if not per_scene:
        raise FileNotFoundError(lay.probability("train"))
    if lay.patches.exists():
        for old in lay.patches.glob("*.png"):
            old.unlink()
    write_patch_set(lay.patches, patches, names=names)
    report = {**_meta(cfg), "patches": len(patches), "scenes": per_scene}
    lay.reports.mkdir(parents=True, exist_ok=True)
    write_json(lay.reports / "extract.json", report)
    return report


def classifier_config(cfg: dict) -> ClassifierConfig:
    net, im, tr = cfg["network"], cfg["imaging"], cfg["training"]
    augment = None
    if im["augment_factor"] > 1:
        augment = AugmentSpec(tuple(im["angle_range"]), tuple(im["scale_range"]), im["augment_factor"])
    pretrained = _load_model(Path(net["pretrained"])) if net["pretrained"] else None
    return ClassifierConfig(
        family=net["family"],
        blocks_per_stage=tuple(net["blocks_per_stage"]),
        n_mixed_blocks=net["n_mixed_blocks"],
        base_channels=net["base_channels"],
        freeze_point=net["freeze_point"],
        batch=tr["cls_batch"],
        lr=tr["cls_lr"],
        augment=augment,
        epsilon=tr["epsilon"],
        pretrained=pretrained,
    )


def train_cls(cfg: dict) -> dict:
    """Stratified cross-validation, then a final model fit on every labelled patch."""
    lay = Layout(cfg)
    patches = [p for p in read_patch_set(_require_path(lay.manifest)) if p.label is not None]
    if not patches:
        raise ConfigError(f"invalid config value paths.data_dir: {lay.manifest} lists no labelled patches")
    tr, seed = cfg["training"], cfg["training"]["seed"]
    config = classifier_config(cfg)
    summary, reports = run_cross_validation(config, patches, tr["k"], tr["cls_epochs"], seed)
    final = config.build(derive_rng(seed, "train-cls", "init"))
    train_classifier(final, patches, (), None, tr["cls_epochs"], config.batch, config.lr, derive_rng(seed, "train-cls"))
    lay.models.mkdir(parents=True, exist_ok=True)
    save_weights(final, lay.classifier)
    result = {
        **_meta(cfg),
        "summary": {
            "method": summary.method,
            "freeze_point": summary.freeze_point,
            "mean_saturation": summary.mean_saturation,
            "mean_best": summary.mean_best,
            "std": summary.std,
            "saturation_epoch": summary.saturation_epoch,
            "confusion": summary.confusion.counts.tolist(),
            "k": summary.k,
        },
        "folds": [r.to_dict() for r in reports],
    }
    lay.reports.mkdir(parents=True, exist_ok=True)
    write_json(lay.cv_report, result)
    return result


def _summary_from_json(d: dict, seed: int) -> CVSummary:
    s = d["summary"]
    return CVSummary(
        s["method"], s["freeze_point"], s["mean_saturation"], s["mean_best"], s["std"], s["saturation_epoch"],
        ConfusionMatrix(np.array(s["confusion"], dtype=np.int64)), s["k"], seed,
    )


def segmentation_metrics(cfg: dict, split: str = "test") -> dict | None:
    """Pixel agreement and component-count error of the probability maps of ``split``."""
    lay = Layout(cfg)
    prob_dir, scene_dir = lay.probability(split), lay.scenes(split)
    if not prob_dir.exists():
        return None
    im = cfg["imaging"]
    rows = []
    for path in sorted(prob_dir.glob("*.png")):
        scene = path.stem
        truth_png = _truth_path(scene_dir, scene)[0]
        truth = _read_truth(scene_dir, scene)
        if truth is None or not truth_png.exists():
            continue
        prob, _ = read_probability_map(path)
        rows.append({
            "scene": scene,
            "pixel_agreement": segmentation_accuracy(prob, read_plane(truth_png), im["agreement_tau"]),
            "components": len(detect(prob, im["tau"], im["min_size"])),
            "cells": len(truth["cells"]),
        })
    if not rows:
        return None
    return {
        "split": split,
        "mean_pixel_agreement": float(np.mean([r["pixel_agreement"] for r in rows])),
        "count_within_one": float(np.mean([abs(r["components"] - r["cells"]) <= 1 for r in rows])),
        "scenes": rows,
    }


def evaluate(cfg: dict) -> dict:
    """Table-1/Table-2 style reports from the cross-validation run plus segmentation metrics."""
    lay = Layout(cfg)
    meta = _meta(cfg)
    header = f"# seed {meta['seed']}  config {meta['config_hash']}\n"
    seg = segmentation_metrics(cfg)
    cv = json.loads(lay.cv_report.read_text()) if lay.cv_report.exists() else None
    if seg is None and cv is None:
        raise FileNotFoundError(lay.cv_report)
    lay.reports.mkdir(parents=True, exist_ok=True)
    files = []
    if cv is not None:
        summary = _summary_from_json(cv, meta["seed"])
        csv_text, txt = report_tables([summary])
        outputs = {
            "table1.csv": csv_text,
            "table1.txt": header + txt,
            "table2.csv": confusion_csv(summary.confusion),
            "table2.txt": header + confusion_text(summary.confusion),
        }
        for name, text in outputs.items():
            (lay.reports / name).write_text(text)
            files.append(name)
    if seg is not None:
        write_json(lay.reports / "segmentation.json", {**meta, **seg})
        files.append("segmentation.json")
    report = {**meta, "files": files}
    write_json(lay.reports / "evaluate.json", report)
    return report


def classify_cells(
    segmenter: NetworkSpec,
    classifier: NetworkSpec,
    image: MultiChannelImage,
    tau: float = 0.7,
    min_size: int = 9,
    patch_size: int = 101,
    target_size: int = 299,
    tile: int = 128,
) -> list[dict]:
    """Segment, extract and classify one scene; one record per detected cell."""
    norm = normalize_image(image)
    prob = tiled_inference(segmenter, fuse_grayscale(norm), tile)
    comps = detect(prob, tau, min_size)
    if not comps:
        return []
    rgb = compose_rgb(norm)
    patches = []
    for comp in comps:
        p = extract_patch(rgb, comp.centroid, patch_size)
        patches.append(resample_bilinear(p, target_size) if target_size != patch_size else p)
    probs = predict_classes(classifier, np.stack([p.data for p in patches]).astype(classifier.dtype))
    return [
        {
            "centroid": [float(c.centroid[0]), float(c.centroid[1])],
            "size": int(c.pixel_count),
            "probabilities": [float(v) for v in row],
            "class": CellClass(int(np.argmax(row))).label,
        }
        for c, row in zip(comps, probs)
    ]


def classify(cfg: dict, split: str = "test") -> dict:
    lay = Layout(cfg)
    segmenter, classifier = _load_model(lay.segmenter), _load_model(lay.classifier)
    scene_dir = lay.scenes(split)
    im = cfg["imaging"]
    out_dir = lay.reports / "classify"
    out_dir.mkdir(parents=True, exist_ok=True)
    matched = correct = 0
    per_scene = {}
    for scene in _scene_ids(scene_dir):
        records = classify_cells(
            segmenter, classifier, read_scene(scene_dir, scene), im["tau"], im["min_size"], im["patch_size"],
            im["target_size"], im["tile"],
        )
        truth = _read_truth(scene_dir, scene)
        for r in records:
            label = _match_label(truth, r["centroid"])
            if label is not None:
                matched += 1
                correct += int(CellClass(label).label == r["class"])
        write_json(out_dir / f"{scene}.json", {**_meta(cfg), "scene": scene, "cells": records})
        per_scene[scene] = len(records)
    report = {**_meta(cfg), "cells": per_scene, "matched": matched,
              "accuracy": 100.0 * correct / matched if matched else None}
    write_json(lay.reports / "classify.json", report)
    return report


def run_gradcheck(cfg: dict, emit=print) -> bool:
    stats: dict = {}
    worst = gradcheck.run_suite(cfg["training"]["gradcheck_seeds"], stats=stats)
    ok = True
    for name, err in worst.items():
        tol = gradcheck.tolerance(name)
        passed = err <= tol
        ok &= passed
        emit(f"{name:28s} max rel err {err:.3e}  tol {tol:.0e}  {'ok' if passed else 'FAIL'}")
    emit(f"probes skipped near kinks: {stats.get('kinks', 0)}")
    return ok


STAGES = {
    "synth": synth,
    "train-seg": train_seg,
    "segment": segment,
    "extract": extract,
    "train-cls": train_cls,
    "classify": classify,
    "evaluate": evaluate,
}
