"""Training loops, metrics, cross-validation and report formatting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import confusion_oracle, expand_counts

from neurocell.errors import ConfigError, ContractError
from neurocell.imaging import Patch, fuse_grayscale, normalize_image
from neurocell.netgraph import build_residual_classifier, build_unet, derive_rng, resolve_freeze_point
from neurocell.synthdata import SceneSpec, generate_scene, scene_seed
from neurocell.trainer import (
    CellClass,
    ClassifierConfig,
    ConfusionMatrix,
    TableRow,
    confusion_and_metrics,
    confusion_text,
    kfold_split,
    parse_table_csv,
    report_tables,
    run_cross_validation,
    saturation_epoch,
    segmentation_accuracy,
    train_classifier,
    train_segmentation,
)

TABLE2 = [[159, 4, 13], [1, 185, 3], [12, 1, 21]]


def seg_scenes(n, size=64, seed=7):
    spec = SceneSpec(size, size, n_cells=4 if size >= 64 else 2, radius_range=(3, 5), seed=seed)
    out = []
    for i in range(n):
        image, truth = generate_scene(spec, scene_seed(seed, i))
        out.append((fuse_grayscale(normalize_image(image)), truth.probability))
    return out


def separable_patches(n, size=8, seed=0):
    rng = np.random.default_rng(seed)
    levels = {0: (0.8, 0.8), 1: (0.8, 0.1), 2: (0.0, 0.8)}
    patches = []
    for i in range(n):
        label = i % 3
        r, g = levels[label]
        data = np.stack([np.full((size, size), r), np.full((size, size), g), np.full((size, size), (r + g) / 2)])
        data = np.clip(data + rng.normal(0, 0.05, data.shape), 0, 1)
        patches.append(Patch(data, label=label))
    return patches


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def test_zero_learning_rate_freezes_everything():
    spec = build_unet(1, 2, rng=derive_rng(0, "t"))
    before = spec.snapshot()
    _, curve = train_segmentation(spec, seg_scenes(2, 32), epochs=2, iters_per_epoch=3, lr=0.0, rng=derive_rng(1, "t"))
    for a, b in zip(before, spec.snapshot()):
        assert np.array_equal(a, b)
    # every epoch visits the same scenes, so the mean loss is identical
    assert curve[0] == pytest.approx(curve[1], rel=1e-6)


def test_segmentation_loss_decreases():
    spec = build_unet(2, 8, rng=derive_rng(7, "init"))
    _, curve = train_segmentation(spec, seg_scenes(16), epochs=5, iters_per_epoch=50, rng=derive_rng(7, "train"))
    assert curve[-1] < curve[0]


def test_segmentation_is_deterministic():
    scenes = seg_scenes(3, 32)
    curves = []
    for _ in range(2):
        spec = build_unet(1, 4, rng=derive_rng(3, "init"))
        curves.append(train_segmentation(spec, scenes, 2, 5, rng=derive_rng(3, "train"))[1])
    assert curves[0] == curves[1]


def test_elastic_training_runs():
    from neurocell.trainer import ElasticSpec

    spec = build_unet(1, 2, rng=derive_rng(0, "e"))
    _, curve = train_segmentation(spec, seg_scenes(2, 32), 1, 2, rng=derive_rng(0, "e"), elastic=ElasticSpec(8, 4, 2))
    assert len(curve) == 1 and np.isfinite(curve[0])


def test_segmentation_accuracy_examples():
    target = np.zeros((10, 10))
    target[:1] = 1.0
    assert segmentation_accuracy(target, target) == 100.0
    assert segmentation_accuracy(1 - target, target) == 0.0
    assert segmentation_accuracy(np.full((10, 10), 0.49), target) == pytest.approx(90.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_table2_oracle():
    m = confusion_and_metrics(*expand_counts(TABLE2))
    np.testing.assert_array_equal(m.confusion.counts, TABLE2)
    np.testing.assert_allclose(m.sensitivity, [90.34, 97.88, 61.76], atol=0.01)
    assert m.accuracy == pytest.approx(91.48, abs=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_metrics_match_counting(pairs):
    truths, preds = zip(*pairs)
    m = confusion_and_metrics(truths, preds)
    assert m.confusion.total == len(pairs)
    sens, spec, acc = confusion_oracle(truths, preds)
    assert m.accuracy == pytest.approx(acc)
    np.testing.assert_allclose(m.sensitivity, sens)
    np.testing.assert_allclose(m.specificity, spec)


def test_perfect_predictions():
    labels = [0, 1, 2, 2, 1, 0]
    m = confusion_and_metrics(labels, labels)
    np.testing.assert_array_equal(m.confusion.counts, np.diag([2, 2, 2]))
    np.testing.assert_array_equal(m.sensitivity, 100.0)


def test_confusion_errors():
    with pytest.raises(ContractError):
        confusion_and_metrics([], [])


def test_confusion_text_layout():
    text = confusion_text(ConfusionMatrix(np.array(TABLE2)))
    assert "90.34" in text and "91.48" in text
    assert text.splitlines()[0].split() == ["Excitatory", "Glial", "cell", "Inhibitory", "Sens.", "Spec."]


@pytest.mark.parametrize(
    "curve, expected",
    [([50, 80, 90, 90.2, 90.3], 3), ([10, 20, 30, 40], 4), ([70, 70, 70], 1), ([60, 80, 79, 80.6], 4)],
)
def test_saturation_epoch(curve, expected):
    assert saturation_epoch(curve, 0.5) == expected


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def test_head_only_learns_separable_data():
    spec = build_residual_classifier([1, 1], 4, 3, rng=derive_rng(0, "init"))
    train, val = separable_patches(90, seed=1), separable_patches(30, seed=2)
    _, preds = train_classifier(spec, train, val, spec.num_layers, epochs=10, batch=8, lr=0.05, rng=derive_rng(0, "t"))
    truth = np.array([p.label for p in val])
    assert max(np.mean(p == truth) for p in preds) > 0.9


def test_classifier_freeze_and_zero_epochs():
    spec = build_residual_classifier([1, 1], 4, 3, rng=derive_rng(1, "init"))
    k = resolve_freeze_point(spec, "block:1")
    before = spec.snapshot()
    train_classifier(spec, separable_patches(12), (), k, epochs=0)
    for a, b in zip(before, spec.snapshot()):
        assert np.array_equal(a, b)
    frozen = [spec.node_snapshot(i) for i in range(k)]
    train_classifier(spec, separable_patches(24), (), k, epochs=2, batch=8)
    for i in range(k):
        for a, b in zip(frozen[i], spec.node_snapshot(i)):
            assert np.array_equal(a, b)


def test_classifier_needs_every_class():
    spec = build_residual_classifier([1], 4, 3)
    patches = [p for p in separable_patches(12) if p.label != 2]
    with pytest.raises(ConfigError, match="Inhibitory"):
        train_classifier(spec, patches, (), None, 1)


def test_kfold_partition():
    labels = np.repeat([0, 1, 2], [45, 45, 10])
    folds = kfold_split(labels, 10, seed=0)
    vals = [set(v.tolist()) for _, v in folds]
    assert all(len(v) == 10 for v in vals)
    assert set().union(*vals) == set(range(100))
    assert sum(len(v) for v in vals) == 100
    for train, val in folds:
        assert not set(train.tolist()) & set(val.tolist())
        for c, share in zip(range(3), (4.5, 4.5, 1.0)):
            assert abs(np.sum(labels[val] == c) - share) <= 1


def test_kfold_seeds():
    labels = np.arange(100) % 3
    a = kfold_split(labels, 10, seed=1)
    b = kfold_split(labels, 10, seed=1)
    c = kfold_split(labels, 10, seed=2)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_kfold_rejects_bad_k():
    with pytest.raises(ConfigError):
        kfold_split([0, 1, 2], 5)


def balanced_patches(n):
    return [Patch(np.zeros((3, 3, 3)), label=i % 3) for i in range(n)]


def test_cv_with_oracle_stub():
    def oracle(train, val, epochs, rng):
        return [np.array([p.label for p in val])] * epochs

    summary, reports = run_cross_validation(ClassifierConfig(name="oracle"), balanced_patches(90), 10, 3, 0, oracle)
    assert summary.mean_best == 100.0 and summary.std == 0.0
    assert summary.confusion.total == 90
    assert len(reports) == 10


def test_cv_with_random_stub():
    def guess(train, val, epochs, rng):
        return [rng.integers(0, 3, len(val)) for _ in range(epochs)]

    summary, _ = run_cross_validation(ClassifierConfig(name="random"), balanced_patches(600), 10, 1, 0, guess)
    assert summary.mean_best == pytest.approx(33.3, abs=5)
    assert summary.confusion.total == 600


def test_cv_real_network_small():
    patches = separable_patches(60, seed=3)
    config = ClassifierConfig(blocks_per_stage=(1,), base_channels=4, batch=8, lr=0.05)
    summary, reports = run_cross_validation(config, patches, 3, 2, seed=1)
    assert summary.method == "U+ResNet1"
    assert all(len(r.curve) == 2 for r in reports)
    again, _ = run_cross_validation(config, patches, 3, 2, seed=1)
    assert again.mean_best == summary.mean_best


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_report_tables_format_and_round_trip():
    row = TableRow("U+ResNet1-1", "input", 91.25, 93.0 + 1 / 3, 1.5, 7)
    csv_text, text = report_tables([row])
    lines = text.strip().splitlines()
    assert len(lines) == 2
    assert "91.250" in lines[1] and "93.333" in lines[1] and "1.500" in lines[1]
    assert lines[0].startswith("No.")
    assert parse_table_csv(csv_text) == [row]


def test_cell_class_labels():
    assert CellClass.parse("glial") == CellClass.GLIAL
    assert CellClass.INHIBITORY.label == "Inhibitory"
    with pytest.raises(ConfigError):
        CellClass.parse("astro")
