"""Synthetic two-channel scenes with known cells.

Channel rules follow the fluorophore semantics: GCaMP marks neurons, nuclear
mCherry marks excitatory neurons and glia. Hence

    Excitatory  mCherry bright, GCaMP bright
    Glial       mCherry bright, GCaMP dim
    Inhibitory  mCherry absent, GCaMP bright
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .imaging import (
    GREEN,
    RED,
    MultiChannelImage,
    Patch,
    compose_rgb,
    extract_patch,
    normalize_image,
    resample_bilinear,
)
from .netgraph import derive_rng
from .trainer import CellClass

TAPER = 1.0  # half-width (px) of the cosine edge around the nominal radius


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    n_cells: int = 10
    class_mix: tuple[float, float, float] = (0.45, 0.45, 0.10)
    radius_range: tuple[float, float] = (4.0, 7.0)
    bright: tuple[float, float] = (0.7, 0.9)
    dim: tuple[float, float] = (0.05, 0.2)
    noise_std: float = 0.03
    min_gap: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.class_mix = tuple(float(p) for p in self.class_mix)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        if len(self.class_mix) != 3 or abs(sum(self.class_mix) - 1.0) > 1e-9 or min(self.class_mix) < 0:
            raise ConfigError(f"class_mix must be three non-negative weights summing to 1, got {self.class_mix}")
        lo, hi = self.radius_range
        if lo < 2 or hi < lo:
            raise ConfigError(f"radius_range must satisfy 2 <= min <= max, got {self.radius_range}")
        if self.height < 2 * hi + 4 or self.width < 2 * hi + 4:
            raise ConfigError(f"scene {self.height}x{self.width} too small for radius {hi}")
        if self.n_cells < 0:
            raise ConfigError(f"n_cells must be >= 0, got {self.n_cells}")
        if self.noise_std < 0 or self.min_gap < 0:
            raise ConfigError("noise_std and min_gap must be >= 0")


@dataclass
class Cell:
    center: tuple[float, float]
    radius: float
    cell_class: CellClass
    levels: tuple[float, float]  # (mCherry, GCaMP) peak intensity


@dataclass
class GroundTruth:
    cells: list[Cell]
    probability: np.ndarray  # 1.0 inside cell disks, 0 elsewhere
    labels: np.ndarray  # cell i (in ``cells`` order) carries label i + 1

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def _place_cells(spec: SceneSpec, rng: np.random.Generator) -> list[tuple[tuple[float, float], float]]:
    placed: list[tuple[tuple[float, float], float]] = []
    attempts = 0
    budget = 10 * spec.n_cells
    while len(placed) < spec.n_cells:
        if attempts >= budget:
            raise GenerationError(
                f"could only place {len(placed)} of {spec.n_cells} non-overlapping cells in "
                f"{spec.height}x{spec.width} after {budget} attempts; try fewer cells or smaller radii"
            )
        attempts += 1
        r = rng.uniform(*spec.radius_range)
        margin = r + TAPER + 1
        cy = rng.uniform(margin, spec.height - 1 - margin)
        cx = rng.uniform(margin, spec.width - 1 - margin)
        if all(np.hypot(cy - py, cx - px) >= r + pr + spec.min_gap for (py, px), pr in placed):
            placed.append(((cy, cx), r))
    return placed


def _levels(cls: CellClass, spec: SceneSpec, rng: np.random.Generator) -> tuple[float, float]:
    bright = lambda: rng.uniform(*spec.bright)  # noqa: E731
    if cls == CellClass.EXCITATORY:
        return bright(), bright()
    if cls == CellClass.GLIAL:
        return bright(), rng.uniform(*spec.dim)
    return 0.0, bright()


def generate_scene(spec: SceneSpec, seed: int | None = None) -> tuple[MultiChannelImage, GroundTruth]:
    """Render one scene; identical ``(spec, seed)`` gives a bitwise-identical result."""
    seed = spec.seed if seed is None else seed
    rng = derive_rng(seed, "scene")
    h, w = spec.height, spec.width
    geometry = _place_cells(spec, rng)
    classes = rng.choice(3, size=len(geometry), p=spec.class_mix)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    red = np.zeros((h, w))
    green = np.zeros((h, w))
    prob = np.zeros((h, w))
    disks = []
    cells = []
    for ((cy, cx), r), cls in zip(geometry, classes):
        cls = CellClass(int(cls))
        levels = _levels(cls, spec, rng)
        d = np.hypot(yy - cy, xx - cx)
        profile = np.clip((r + TAPER - d) / (2 * TAPER), 0.0, 1.0)
        profile = 0.5 - 0.5 * np.cos(np.pi * profile)
        red = np.maximum(red, levels[0] * profile)
        green = np.maximum(green, levels[1] * profile)
        disk = d <= r
        prob[disk] = 1.0
        disks.append(disk)
        cells.append(Cell((float(cy), float(cx)), float(r), cls, levels))

    red = np.clip(red + rng.normal(0.0, spec.noise_std, (h, w)), 0.0, 1.0)
    green = np.clip(green + rng.normal(0.0, spec.noise_std, (h, w)), 0.0, 1.0)

    # order cells by first disk pixel in a row-major scan, matching component labels
    first = [int(np.flatnonzero(disk.ravel())[0]) if disk.any() else h * w for disk in disks]
    order = np.argsort(first, kind="stable")
    cells = [cells[i] for i in order]
    labels = np.zeros((h, w), dtype=np.int32)
    for new, i in enumerate(order, start=1):
        labels[disks[i]] = new
    image = MultiChannelImage({RED: red, GREEN: green})
    return image, GroundTruth(cells, prob, labels)


def scene_seed(seed: int, index: int) -> int:
    return int(derive_rng(seed, "scene-index", str(index)).integers(0, 2**31 - 1))


def cell_centroid(truth: GroundTruth, i: int) -> tuple[float, float]:
    rows, cols = np.nonzero(truth.labels == i + 1)
    return float(rows.mean()), float(cols.mean())


def generate_patch_dataset(
    spec: SceneSpec,
    n_scenes: int,
    patch_size: int = 101,
    target_size: int | None = None,
) -> list[Patch]:
    """Labelled RGB patches cut at ground-truth cell centroids of ``n_scenes`` scenes."""
    patches = []
    for s in range(n_scenes):
        image, truth = generate_scene(spec, scene_seed(spec.seed, s))
        rgb = compose_rgb(normalize_image(image))
        for i, cell in enumerate(truth.cells):
            p = extract_patch(rgb, cell_centroid(truth, i), patch_size, f"scene{s:04d}", int(cell.cell_class))
            if target_size is not None:
                p = resample_bilinear(p, target_size)
            patches.append(p)
    return patches
