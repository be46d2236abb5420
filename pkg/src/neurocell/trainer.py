"""Training loops, cross-validation and evaluation metrics."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .imaging import AugmentSpec, Patch, amplify, elastic_deform
from .netgraph import (
    NetworkSpec,
    build,
    derive_rng,
    forward_pass,
    predict,
    replace_head,
    resolve_freeze_point,
    set_freeze_point,
)

log = logging.getLogger(__name__)


class CellClass(IntEnum):
    EXCITATORY = 0
    GLIAL = 1
    INHIBITORY = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "CellClass":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown cell class {text!r}") from None


N_CLASSES = len(CellClass)


def _lr_for_epoch(lr: float, epoch: int, epochs: int, decay_at: float = 0.75) -> float:
    return lr * 0.1 if epoch >= int(decay_at * epochs) else lr


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass
class ElasticSpec:
    grid_spacing: int = 16
    sigma: float = 4.0
    alpha: float = 2.0


def _epoch_order(n_items: int, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    reps = -(-n_draws // n_items)
    return np.concatenate([rng.permutation(n_items) for _ in range(reps)])[:n_draws]


def train_segmentation(
    spec: NetworkSpec,
    scenes: Sequence[tuple[np.ndarray, np.ndarray]],
    epochs: int = 10,
    iters_per_epoch: int = 1000,
    batch: int = 1,
    lr: float = 0.01,
    rng: np.random.Generator | None = None,
    momentum: float = 0.9,
    elastic: ElasticSpec | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[NetworkSpec, list[float]]:
    """Fit the segmenter on ``(grayscale, target)`` pairs with pixelwise cross-entropy.

    Each epoch draws scenes as shuffled passes over the dataset. Returns the
    (in-place trained) spec and the per-epoch mean loss.
    """
    if not scenes:
        raise ConfigError("train_segmentation: empty dataset")
    if epochs < 0 or iters_per_epoch < 1 or batch < 1:
        raise ConfigError("train_segmentation: epochs >= 0, iters_per_epoch >= 1, batch >= 1 required")
    rng = rng if rng is not None else derive_rng(0, "train-seg")
    dtype = spec.dtype
    images = np.stack([np.asarray(g, dtype=dtype) for g, _ in scenes])[:, None]
    targets = np.stack([np.asarray(t, dtype=dtype) for _, t in scenes])[:, None]
    state = T.OptimizerState(lr, momentum)
    params = spec.parameters(trainable_only=True)
    curve = []
    for epoch in range(epochs):
        state.learning_rate = _lr_for_epoch(lr, epoch, epochs)
        order = _epoch_order(len(scenes), iters_per_epoch * batch, rng)
        total = 0.0
        for it in range(iters_per_epoch):
            idx = order[it * batch : (it + 1) * batch]
            x, t = images[idx], targets[idx]
            if elastic is not None and elastic.alpha > 0:
                pairs = [
                    elastic_deform(np.concatenate([xi, ti]), elastic.grid_spacing, elastic.sigma, elastic.alpha, rng)
                    for xi, ti in zip(x, t)
                ]
                x = np.stack([p[:1] for p in pairs])
                t = np.stack([p[1:] for p in pairs])
            loss = T.cross_entropy(forward_pass(spec, x, "train"), t, "pixelwise_binary")
            T.backward(loss)
            T.optimizer_step(params, state)
            total += loss.item()
        curve.append(total / iters_per_epoch)
        log.info("segmentation epoch %d/%d: mean loss %.5f", epoch + 1, epochs, curve[-1])
        if progress:
            progress(epoch, curve[-1])
    return spec, curve


def segmentation_accuracy(pred: np.ndarray, target: np.ndarray, tau: float = 0.5) -> float:
    """Percent of pixels on which both maps agree after thresholding at ``tau`` (strict)."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"segmentation_accuracy: shapes {pred.shape} and {target.shape} differ")
    return float(np.mean((pred > tau) == (target > tau)) * 100.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are the true class, columns the predicted class."""

    counts: np.ndarray

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls(np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return 100.0 * np.trace(self.counts) / self.total if self.total else 0.0

    def sensitivity(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 100.0 * np.diag(self.counts) / rows, np.nan)

    def specificity(self) -> np.ndarray:
        c = self.counts
        tp = np.diag(c)
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        tn = c.sum() - tp - fp - fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tn + fp > 0, 100.0 * tn / (tn + fp), np.nan)


@dataclass
class ClassificationMetrics:
    confusion: ConfusionMatrix
    sensitivity: np.ndarray
    specificity: np.ndarray
    accuracy: float


def confusion_and_metrics(truths: Sequence[int], preds: Sequence[int]) -> ClassificationMetrics:
    truths = np.asarray(truths, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if truths.size == 0:
        raise ContractError("confusion_and_metrics: empty input")
    if truths.shape != preds.shape:
        raise DimensionError(f"confusion_and_metrics: {truths.size} truths vs {preds.size} predictions")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    cm = ConfusionMatrix(counts)
    return ClassificationMetrics(cm, cm.sensitivity(), cm.specificity(), cm.accuracy())


def saturation_epoch(curve: Sequence[float], epsilon: float = 0.5) -> int:
    """1-based first epoch after which the curve never rises by ``epsilon`` or more."""
    curve = list(curve)
    if not curve:
        raise ContractError("saturation_epoch: empty curve")
    for e in range(len(curve)):
        if max(curve[e:]) - curve[e] < epsilon:
            return e + 1
    return len(curve)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass
class FoldReport:
    fold: int
    curve: list[float]
    best_epoch: int
    best_accuracy: float
    saturation_epoch: int
    saturation_accuracy: float
    confusion: ConfusionMatrix
    epoch_confusions: list[ConfusionMatrix] = field(default_factory=list, repr=False)

    @classmethod
    def from_predictions(
        cls, fold: int, truths: np.ndarray, epoch_preds: Sequence[np.ndarray], epsilon: float = 0.5
    ) -> "FoldReport":
        if not epoch_preds:
            raise ContractError("fold report needs at least one epoch of predictions")
        metrics = [confusion_and_metrics(truths, p) for p in epoch_preds]
        curve = [m.accuracy for m in metrics]
        best = int(np.argmax(curve))
        sat = saturation_epoch(curve, epsilon)
        return cls(
            fold,
            curve,
            best + 1,
            curve[best],
            sat,
            curve[sat - 1],
            metrics[sat - 1].confusion,
            [m.confusion for m in metrics],
        )

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "curve": self.curve,
            "best_epoch": self.best_epoch,
            "best_accuracy": self.best_accuracy,
            "saturation_epoch": self.saturation_epoch,
            "saturation_accuracy": self.saturation_accuracy,
            "confusion": self.confusion.counts.tolist(),
            "epoch_confusions": [c.counts.tolist() for c in self.epoch_confusions],
        }


def _stack_patches(patches: Sequence[Patch], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.data for p in patches]).astype(dtype)
    y = np.array([int(p.label) for p in patches], dtype=np.int64)
    return x, y


def predict_classes(spec: NetworkSpec, x: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode class probabilities for an N x 3 x P x P array."""
    out = [predict(spec, x[i : i + batch]) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def train_classifier(
    spec: NetworkSpec,
    train: Sequence[Patch],
    validation: Sequence[Patch] = (),
    freeze_point: int | None = None,
    epochs: int = 11,
    batch: int = 16,
    lr: float = 0.01,
    rng: np.random.Generator | None = None,
    momentum: float = 0.9,
) -> tuple[NetworkSpec, list[np.ndarray]]:
    """Fine-tune ``spec`` in place from ``freeze_point`` up with categorical cross-entropy.

    Returns the spec and, per epoch, the predicted classes on ``validation``.
    """
    if freeze_point is not None:
        set_freeze_point(spec, freeze_point)
    present = {int(p.label) for p in train}
    missing = [c.label for c in CellClass if int(c) not in present]
    if missing:
        raise ConfigError(f"train_classifier: classes absent from training split: {missing}")
    if epochs < 0 or batch < 1:
        raise ConfigError("train_classifier: epochs >= 0 and batch >= 1 required")
    rng = rng if rng is not None else derive_rng(0, "train-cls")
    dtype = spec.dtype
    x, y = _stack_patches(train, dtype)
    xv = _stack_patches(validation, dtype)[0] if len(validation) else None
    state = T.OptimizerState(lr, momentum)
    params = spec.parameters(trainable_only=True)
    epoch_preds = []
    for epoch in range(epochs):
        state.learning_rate = _lr_for_epoch(lr, epoch, epochs)
        order = rng.permutation(len(x))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            probs = forward_pass(spec, x[idx], "train")
            loss = T.cross_entropy(probs, y[idx], "categorical")
            T.backward(loss)
            T.optimizer_step(params, state)
        if xv is not None:
            epoch_preds.append(predict_classes(spec, xv).argmax(axis=1))
    return spec, epoch_preds


def kfold_split(labels: Sequence[int], k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds: each class is shuffled and dealt round-robin.

    The deal continues across classes, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2 or k > len(labels):
        raise ConfigError(f"kfold_split: need 2 <= k <= {len(labels)} items, got k={k}")
    rng = derive_rng(seed, "kfold")
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            warnings.warn(f"class {cls} has only {len(members)} items for {k} folds; some folds lack it")
        for i in rng.permutation(members):
            folds[pos % k].append(int(i))
            pos += 1
    everything = np.arange(len(labels))
    out = []
    for f in folds:
        val = np.sort(np.array(f, dtype=np.int64))
        out.append((np.setdiff1d(everything, val), val))
    return out


@dataclass
class ClassifierConfig:
    family: str = "residual"
    blocks_per_stage: tuple[int, ...] = (1, 1)
    n_mixed_blocks: int = 2
    base_channels: int = 8
    freeze_point: str = "input"
    batch: int = 16
    lr: float = 0.01
    augment: AugmentSpec | None = None
    epsilon: float = 0.5
    name: str = ""
    pretrained: NetworkSpec | None = field(default=None, repr=False)

    @property
    def method(self) -> str:
        if self.name:
            return self.name
        if self.family == "residual":
            return "U+ResNet" + "-".join(str(b) for b in self.blocks_per_stage)
        return f"U+Inception{self.n_mixed_blocks}"

    def build(self, rng: np.random.Generator) -> NetworkSpec:
        """Fresh network, or the pretrained one with a re-initialized 3-way head."""
        if self.pretrained is not None:
            spec = replace_head(self.pretrained, N_CLASSES, rng)
        elif self.family == "residual":
            spec = build("residual", dict(blocks_per_stage=list(self.blocks_per_stage), base_channels=self.base_channels, n_classes=N_CLASSES), rng=rng)
        elif self.family == "inception":
            spec = build("inception", dict(n_mixed_blocks=self.n_mixed_blocks, base_channels=self.base_channels, n_classes=N_CLASSES), rng=rng)
        else:
            raise ConfigError(f"unknown classifier family {self.family!r}")
        return set_freeze_point(spec, resolve_freeze_point(spec, self.freeze_point))


# (train, validation, epochs, rng) -> per-epoch predicted classes on validation
FoldRunner = Callable[[list[Patch], list[Patch], int, np.random.Generator], list[np.ndarray]]


def network_fold_runner(config: ClassifierConfig, seed: int) -> FoldRunner:
    def run(train, validation, epochs, rng):
        spec = config.build(derive_rng(int(rng.integers(2**31)), "init"))
        if config.augment is not None and config.augment.factor > 1:
            train = amplify(train, config.augment, int(rng.integers(2**31)))
        _, preds = train_classifier(spec, train, validation, None, epochs, config.batch, config.lr, rng)
        return preds

    return run


@dataclass
class CVSummary:
    method: str
    freeze_point: str
    mean_saturation: float
    mean_best: float
    std: float
    saturation_epoch: int
    confusion: ConfusionMatrix
    k: int
    seed: int


def run_cross_validation(
    config: ClassifierConfig,
    patches: Sequence[Patch],
    k: int = 10,
    epochs: int = 11,
    seed: int = 0,
    runner: FoldRunner | None = None,
) -> tuple[CVSummary, list[FoldReport]]:
    """One fresh model per stratified fold; Table-1 style summary plus per-fold reports.

    The summary's saturation epoch is taken on the fold-mean accuracy curve;
    the confusion matrix is the fold sum at that epoch.
    """
    patches = list(patches)
    labels = [int(p.label) for p in patches]
    runner = runner or network_fold_runner(config, seed)
    reports = []
    for fold, (tr, va) in enumerate(kfold_split(labels, k, seed)):
        rng = derive_rng(seed, "fold", str(fold))
        train = [patches[i] for i in tr]
        val = [patches[i] for i in va]
        preds = runner(train, val, epochs, rng)
        truths = np.array([labels[i] for i in va])
        reports.append(FoldReport.from_predictions(fold, truths, preds, config.epsilon))
        log.info("fold %d/%d: best %.3f at epoch %d", fold + 1, k, reports[-1].best_accuracy, reports[-1].best_epoch)
    mean_curve = np.mean([r.curve for r in reports], axis=0)
    sat = saturation_epoch(mean_curve, config.epsilon)
    best = np.array([r.best_accuracy for r in reports])
    confusion = ConfusionMatrix.empty()
    for r in reports:
        confusion = confusion + r.epoch_confusions[sat - 1]
    summary = CVSummary(
        method=config.method,
        freeze_point=str(config.freeze_point),
        mean_saturation=float(np.mean([r.curve[sat - 1] for r in reports])),
        mean_best=float(best.mean()),
        std=float(best.std(ddof=1)) if len(best) > 1 else 0.0,
        saturation_epoch=sat,
        confusion=confusion,
        k=k,
        seed=seed,
    )
    return summary, reports


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

TABLE_COLUMNS = (
    "method",
    "transfer_layer",
    "mean_accuracy_saturation",
    "mean_accuracy_best_epoch",
    "standard_deviation",
    "saturation_epoch",
)


@dataclass(frozen=True)
class TableRow:
    method: str
    transfer_layer: str
    mean_saturation: float
    mean_best: float
    std: float
    saturation_epoch: int

    @classmethod
    def from_summary(cls, s: CVSummary) -> "TableRow":
        return cls(s.method, s.freeze_point, s.mean_saturation, s.mean_best, s.std, s.saturation_epoch)


def _rows(items) -> list[TableRow]:
    return [r if isinstance(r, TableRow) else TableRow.from_summary(r) for r in items]


def table_csv(summaries) -> str:
    """Table-1 rows as CSV; floats are written at full precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in _rows(summaries):
        w.writerow([r.method, r.transfer_layer, repr(r.mean_saturation), repr(r.mean_best), repr(r.std), r.saturation_epoch])
    return buf.getvalue()


def parse_table_csv(text: str) -> list[TableRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != TABLE_COLUMNS:
        raise ConfigError(f"unexpected table header {header}")
    return [TableRow(m, t, float(a), float(b), float(s), int(e)) for m, t, a, b, s, e in reader]


def table_text(summaries) -> str:
    """Aligned plain-text Table 1 with three-decimal accuracies."""
    header = ("No.", "Methods (Transfer Layer)", "Mean Accuracy (saturation)", "Mean Accuracy (best epoch)",
              "Standard Deviation", "Saturation Epoch")
    body = [
        (str(i), f"{r.method} ({r.transfer_layer})", f"{r.mean_saturation:.3f}", f"{r.mean_best:.3f}",
         f"{r.std:.3f}", str(r.saturation_epoch))
        for i, r in enumerate(_rows(summaries), start=1)
    ]
    widths = [max(len(row[c]) for row in [header, *body]) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip() for row in [header, *body]]
    return "\n".join(lines) + "\n"


def report_tables(summaries) -> tuple[str, str]:
    """(CSV, aligned text) renderings of the Table-1 style summary."""
    return table_csv(summaries), table_text(summaries)


def confusion_text(cm: ConfusionMatrix) -> str:
    """Table-2 layout: counts, per-class sensitivity and specificity, overall accuracy."""
    names = [c.label if c != CellClass.GLIAL else "Glial cell" for c in CellClass]
    sens, spec = cm.sensitivity(), cm.specificity()
    header = ["", *names, "Sens.", "Spec."]
    rows = [[n, *[str(v) for v in cm.counts[i]], f"{sens[i]:.2f}", f"{spec[i]:.2f}"] for i, n in enumerate(names)]
    rows.append(["Accuracy", "-", "-", "-", f"{cm.accuracy():.2f}", ""])
    widths = [max(len(r[c]) for r in [header, *rows]) for c in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *rows]) + "\n"


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_class", *[c.label for c in CellClass], "sensitivity", "specificity"])
    sens, spec = cm.sensitivity(), cm.specificity()
    for c in CellClass:
        w.writerow([c.label, *cm.counts[c].tolist(), f"{sens[c]:.4f}", f"{spec[c]:.4f}"])
    w.writerow(["accuracy", "", "", "", f"{cm.accuracy():.4f}", ""])
    return buf.getvalue()
