"""Classical raster processing for the two-channel cell images.

Rasters are plain numpy arrays: planes are H x W, multi-channel images and
patches are C x H x W. Everything that samples outside an image uses mirror
reflection about the border pixel (numpy's ``reflect`` padding), so
``a b c d`` extends to ``c b | a b c d | c b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, DimensionError
from .netgraph import NetworkSpec, derive_rng, predict, receptive_radius

RED, GREEN = "mCherry", "GCaMP"


@dataclass
class MultiChannelImage:
    """Named planes sharing one height x width (at least ``mCherry`` and ``GCaMP``)."""

    channels: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = {name: np.shape(p) for name, p in self.channels.items()}
        if len(set(shapes.values())) > 1:
            raise DimensionError(f"channel planes differ in shape: {shapes}")
        for name, shape in shapes.items():
            if len(shape) != 2:
                raise DimensionError(f"channel {name!r} must be 2-D, got shape {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.channels.values())).shape

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise ContractError(f"image has no {name!r} channel (has {sorted(self.channels)})") from None


@dataclass
class Component:
    label: int
    pixel_count: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]  # row_min, col_min, row_max, col_max (inclusive)


@dataclass
class Patch:
    data: np.ndarray  # 3 x P x P, values in [0, 1]
    centroid: tuple[float, float] = (0.0, 0.0)
    source_id: str = ""
    label: int | None = None

    @property
    def size(self) -> int:
        return self.data.shape[-1]


@dataclass
class AugmentSpec:
    angle_range: tuple[float, float] = (-30.0, 30.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    factor: int = 2

    def __post_init__(self):
        lo, hi = self.angle_range
        if not (-180 < lo <= hi <= 180):
            raise ConfigError(f"angle_range must lie within (-180, 180], got {self.angle_range}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.factor < 1:
            raise ConfigError(f"amplification factor must be >= 1, got {self.factor}")


# ---------------------------------------------------------------------------
# intensity
# ---------------------------------------------------------------------------


def normalize_channel(plane: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Clip to the [1st, 99th] percentile range, then min-max rescale to [0, 1].

    A plane that is flat after clipping maps to all zeros.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.size == 0:
        raise DimensionError("normalize_channel: empty plane")
    lo, hi = np.percentile(plane, [low_pct, high_pct])
    clipped = np.clip(plane, lo, hi)
    mn, mx = clipped.min(), clipped.max()
    if mx <= mn:
        return np.zeros_like(clipped)
    return (clipped - mn) / (mx - mn)


def normalize_image(img: MultiChannelImage) -> MultiChannelImage:
    return MultiChannelImage({name: normalize_channel(p) for name, p in img.channels.items()})


def fuse_grayscale(img: MultiChannelImage) -> np.ndarray:
    """Mean of the normalized mCherry and GCaMP planes."""
    return (img[RED] + img[GREEN]) / 2.0


def compose_rgb(img: MultiChannelImage) -> np.ndarray:
    """3 x H x W stack: R = mCherry, G = GCaMP, B = their mean."""
    r, g = img[RED], img[GREEN]
    return np.stack([r, g, (r + g) / 2.0])


# ---------------------------------------------------------------------------
# binary objects
# ---------------------------------------------------------------------------


def threshold_map(prob: np.ndarray, tau: float = 0.7) -> np.ndarray:
    """Foreground where ``prob > tau`` (strict)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold tau must lie in [0, 1], got {tau}")
    return (np.asarray(prob) > tau).astype(np.uint8)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def connected_components(binary: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, list[Component]]:
    """Two-pass union-find labeling.

    Labels are contiguous ``1..K`` in order of each component's first pixel in
    a row-major scan; 0 is background.
    """
    if connectivity == 8:
        offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    elif connectivity == 4:
        offsets = ((-1, 0), (0, -1))
    else:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(binary)
    if binary.ndim != 2:
        raise DimensionError(f"connected_components expects a 2-D raster, got shape {binary.shape}")
    h, w = binary.shape
    fg = (binary != 0).tolist()
    provisional = [[0] * w for _ in range(h)]
    parent = [0]
    for r in range(h):
        row, lab = fg[r], provisional[r]
        for c in range(w):
            if not row[c]:
                continue
            found = 0
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr and 0 <= cc < w:
                    n = provisional[rr][cc]
                    if n:
                        if not found:
                            found = n
                        elif n != found:
                            a, b = _find(parent, found), _find(parent, n)
                            if a != b:
                                parent[max(a, b)] = min(a, b)
            if not found:
                found = len(parent)
                parent.append(found)
            lab[c] = found
    final = {}
    labels = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        lab = provisional[r]
        for c in range(w):
            if lab[c]:
                root = _find(parent, lab[c])
                if root not in final:
                    final[root] = len(final) + 1
                labels[r, c] = final[root]
    return labels, components_from_labels(labels)


def components_from_labels(labels: np.ndarray) -> list[Component]:
    k = int(labels.max()) if labels.size else 0
    if k == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    counts = np.bincount(lab, minlength=k + 1)
    sr = np.bincount(lab, weights=rows, minlength=k + 1)
    sc = np.bincount(lab, weights=cols, minlength=k + 1)
    rmin = np.full(k + 1, np.iinfo(np.int64).max)
    cmin = rmin.copy()
    rmax = np.full(k + 1, -1)
    cmax = rmax.copy()
    np.minimum.at(rmin, lab, rows)
    np.minimum.at(cmin, lab, cols)
    np.maximum.at(rmax, lab, rows)
    np.maximum.at(cmax, lab, cols)
    return [
        Component(
            i,
            int(counts[i]),
            (sr[i] / counts[i], sc[i] / counts[i]),
            (int(rmin[i]), int(cmin[i]), int(rmax[i]), int(cmax[i])),
        )
        for i in range(1, k + 1)
    ]


def filter_components(components: list[Component], min_size: int = 9) -> list[Component]:
    """Drop components smaller than ``min_size`` pixels."""
    return [c for c in components if c.pixel_count >= min_size]


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------


def mirror_index(idx, n: int) -> np.ndarray:
    """Map arbitrary integer positions into ``0..n-1`` by reflecting about the border pixels."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def bilinear_sample(stack: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample a C x H x W stack at fractional coordinates with mirror fill."""
    _, h, w = stack.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = (rows - r0)[None]
    fc = (cols - c0)[None]
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    ra, rb = mirror_index(r0, h), mirror_index(r0 + 1, h)
    ca, cb = mirror_index(c0, w), mirror_index(c0 + 1, w)
    top = stack[:, ra, ca] * (1 - fc) + stack[:, ra, cb] * fc
    bottom = stack[:, rb, ca] * (1 - fc) + stack[:, rb, cb] * fc
    return top * (1 - fr) + bottom * fr


def _as_stack(x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Patch) else np.asarray(x)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise DimensionError(f"expected H x W or C x H x W raster, got shape {arr.shape}")
    return arr, False


def _rewrap(original, stack: np.ndarray, squeezed: bool):
    out = stack[0] if squeezed else stack
    if isinstance(original, Patch):
        return replace(original, data=out)
    return out


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def extract_patch(
    image: np.ndarray,
    centroid: tuple[float, float],
    size: int = 101,
    source_id: str = "",
    label: int | None = None,
) -> Patch:
    """Crop a ``size`` x ``size`` window centred on the rounded centroid."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"patch size must be a positive odd number, got {size}")
    stack, _ = _as_stack(image)
    half = size // 2
    r, c = round_half_away(centroid[0]), round_half_away(centroid[1])
    rows = mirror_index(np.arange(r - half, r + half + 1), stack.shape[1])
    cols = mirror_index(np.arange(c - half, c + half + 1), stack.shape[2])
    data = stack[:, rows][:, :, cols]
    return Patch(data, (float(centroid[0]), float(centroid[1])), source_id, label)


def resample_bilinear(patch, target: int = 299):
    """Resize the spatial axes to ``target`` x ``target`` on a corner-aligned grid."""
    if target < 1:
        raise ConfigError(f"resample target must be >= 1, got {target}")
    stack, squeezed = _as_stack(patch)
    h, w = stack.shape[1:]
    if h == target and w == target:
        return patch
    def axis(n):
        if target == 1:
            return np.array([(n - 1) / 2.0])
        return np.arange(target) * ((n - 1) / (target - 1))

    rows, cols = np.meshgrid(axis(h), axis(w), indexing="ij")
    return _rewrap(patch, bilinear_sample(stack, rows, cols), squeezed)


def augment_affine(patch, spec: AugmentSpec, rng: np.random.Generator, angle: float | None = None, scale: float | None = None):
    """Random rotation + isotropic scaling about the patch centre.

    ``angle``/``scale`` override the random draws; angle 0 with scale 1
    returns the input unchanged.
    """
    if angle is None:
        angle = rng.uniform(*spec.angle_range)
    if scale is None:
        scale = rng.uniform(*spec.scale_range)
    if angle == 0 and scale == 1:
        return patch
    stack, squeezed = _as_stack(patch)
    h, w = stack.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    t = math.radians(angle)
    cos, sin = math.cos(t), math.sin(t)
    rows = cy + (cos * yy + sin * xx) / scale
    cols = cx + (-sin * yy + cos * xx) / scale
    return _rewrap(patch, bilinear_sample(stack, rows, cols), squeezed)


def amplify(patches: list[Patch], spec: AugmentSpec, seed: int = 0) -> list[Patch]:
    """Originals followed by ``factor - 1`` augmented copies of each patch.

    Copy ``j`` of patch ``i`` draws from its own stream keyed by ``(seed, i, j)``.
    """
    out = list(patches)
    for j in range(1, spec.factor):
        for i, p in enumerate(patches):
            out.append(augment_affine(p, spec, derive_rng(seed, "augment", str(i), str(j))))
    return out


def elastic_field(shape: tuple[int, int], grid_spacing: int, sigma: float, alpha: float, rng: np.random.Generator):
    """Displacement field (2 x H x W, pixels): per-node normals, upsampled, Gaussian-smoothed, scaled."""
    h, w = shape
    gh, gw = h // grid_spacing + 2, w // grid_spacing + 2
    coarse = rng.standard_normal((2, gh, gw))
    rows, cols = np.meshgrid(np.arange(h) / grid_spacing, np.arange(w) / grid_spacing, indexing="ij")
    fine = bilinear_sample(coarse, rows, cols)
    return alpha * np.stack([gaussian_filter(f, sigma, mode="mirror") for f in fine])


def elastic_deform(image, grid_spacing: int = 16, sigma: float = 4.0, alpha: float = 2.0, rng=None):
    """Warp by a smooth random displacement field; all channels share the field."""
    if grid_spacing < 2 or sigma <= 0 or alpha < 0:
        raise ConfigError(
            f"elastic_deform needs grid_spacing >= 2, sigma > 0, alpha >= 0 (got {grid_spacing}, {sigma}, {alpha})"
        )
    if alpha == 0:
        return image
    stack, squeezed = _as_stack(image)
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = stack.shape[1:]
    dy, dx = elastic_field((h, w), grid_spacing, sigma, alpha, rng)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    warped = bilinear_sample(stack, rows + dy, cols + dx).astype(stack.dtype, copy=False)
    return _rewrap(image, warped, squeezed)


# ---------------------------------------------------------------------------
# overlap-tile inference
# ---------------------------------------------------------------------------


def _divisor(spec: NetworkSpec) -> int:
    return int(spec.nodes[0].attrs.get("divisor", 1))


def required_overlap(spec: NetworkSpec) -> int:
    """Smallest overlap that is >= the receptive radius and keeps pooling grids aligned."""
    d = _divisor(spec)
    return -(-receptive_radius(spec) // d) * d


def _extend(image: np.ndarray, tile: int, margin: int) -> np.ndarray:
    h, w = image.shape
    hp, wp = -(-h // tile) * tile, -(-w // tile) * tile
    rows = mirror_index(np.arange(-margin, hp + margin), h)
    cols = mirror_index(np.arange(-margin, wp + margin), w)
    return image[np.ix_(rows, cols)]


def mirrored_inference(spec: NetworkSpec, image: np.ndarray, margin: int = 0) -> np.ndarray:
    """Whole-image prediction with ``margin`` pixels of mirrored context on each side."""
    image = np.asarray(image)
    d = _divisor(spec)
    if margin % d:
        raise ConfigError(f"margin {margin} must be a multiple of {d}")
    h, w = image.shape
    ext = _extend(image, d, margin)
    out = predict(spec, ext[None])
    return _probability(out)[margin : margin + h, margin : margin + w]


def _probability(out: np.ndarray) -> np.ndarray:
    return out[0] if out.shape[0] == 1 else out


def tiled_inference(spec: NetworkSpec, image: np.ndarray, tile: int = 128, overlap: int | None = None) -> np.ndarray:
    """Overlap-tile prediction of a grayscale image.

    The image is mirrored outward by ``overlap``; each ``tile`` x ``tile``
    block is predicted from a window padded by ``overlap`` on every side and
    only its centre is kept. When ``overlap`` covers the receptive field the
    result equals :func:`mirrored_inference` with the same margin.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"tiled_inference expects a 2-D image, got shape {image.shape}")
    d = _divisor(spec)
    need = required_overlap(spec)
    if overlap is None:
        overlap = need
    if tile < 1 or tile % d:
        raise ConfigError(f"tile {tile} must be a positive multiple of {d}")
    if overlap < receptive_radius(spec) or overlap % d:
        raise ConfigError(
            f"overlap {overlap} too small or misaligned: receptive-field radius is "
            f"{receptive_radius(spec)}, use an overlap of at least {need} (a multiple of {d})"
        )
    h, w = image.shape
    ext = _extend(image, tile, overlap)
    hp, wp = ext.shape[0] - 2 * overlap, ext.shape[1] - 2 * overlap
    result = None
    for ty in range(0, hp, tile):
        for tx in range(0, wp, tile):
            window = ext[ty : ty + tile + 2 * overlap, tx : tx + tile + 2 * overlap]
            pred = _probability(predict(spec, window[None]))
            if result is None:
                result = np.zeros(pred.shape[:-2] + (hp, wp), dtype=pred.dtype)
            result[..., ty : ty + tile, tx : tx + tile] = pred[..., overlap : overlap + tile, overlap : overlap + tile]
    return result[..., :h, :w]
