"""Independent reference implementations used by the tests."""

import numpy as np


def flood_fill_labels(binary: np.ndarray) -> np.ndarray:
    """8-connected labels by explicit-stack flood fill, numbered in row-major discovery order."""
    h, w = binary.shape
    labels = np.zeros((h, w), dtype=np.int64)
    current = 0
    for r in range(h):
        for c in range(w):
            if not binary[r, c] or labels[r, c]:
                continue
            current += 1
            labels[r, c] = current
            stack = [(r, c)]
            while stack:
                y, x = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = current
                            stack.append((ny, nx))
    return labels


def canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so components are numbered by first pixel in row-major order (0 stays background)."""
    flat = labels.ravel()
    out = np.zeros_like(flat)
    mapping = {}
    for i, v in enumerate(flat):
        if v:
            out[i] = mapping.setdefault(v, len(mapping) + 1)
    return out.reshape(labels.shape)


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    return np.array_equal(canonical(a), canonical(b))


def confusion_oracle(truths, preds, n=3):
    """Per-class sensitivity/specificity and accuracy by explicit counting."""
    pairs = list(zip(truths, preds))
    total = len(pairs)
    sens, spec = [], []
    for k in range(n):
        tp = sum(1 for t, p in pairs if t == k and p == k)
        fn = sum(1 for t, p in pairs if t == k and p != k)
        fp = sum(1 for t, p in pairs if t != k and p == k)
        tn = total - tp - fn - fp
        sens.append(100.0 * tp / (tp + fn) if tp + fn else float("nan"))
        spec.append(100.0 * tn / (tn + fp) if tn + fp else float("nan"))
    acc = 100.0 * sum(1 for t, p in pairs if t == p) / total
    return sens, spec, acc


def expand_counts(counts):
    """Truth/prediction lists realizing a confusion count matrix."""
    truths, preds = [], []
    for t, row in enumerate(counts):
        for p, c in enumerate(row):
            truths += [t] * c
            preds += [p] * c
    return truths, preds
