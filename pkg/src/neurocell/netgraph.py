"""Layer graphs for the segmenter and the two classifier families.

A :class:`NetworkSpec` is an ordered list of :class:`LayerNode` objects; every
node only reads from lower-indexed nodes, so a forward pass is a single scan.
Block boundaries (``add`` nodes of residual blocks, ``concat`` nodes of mixed
blocks, downsampling pools) are the legal freeze points for fine-tuning.
"""

from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import BatchNormState, Tensor

NODE_KINDS = ("input", "conv", "convT", "pool", "dense", "activation", "batchnorm", "concat", "add", "output")
_KIND_TAG = {k: i for i, k in enumerate(NODE_KINDS)}

MAGIC = b"NCW1"
FORMAT_VERSION = 1


def derive_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for a named stream, e.g. ``derive_rng(7, "init", "unet")``."""
    keys = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


@dataclass
class LayerNode:
    index: int
    kind: str
    inputs: list[int]
    params: dict[str, Tensor] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    trainable: bool = True
    bn_state: BatchNormState | None = None

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters plus running statistics, in serialization order."""
        out = [(name, t.data) for name, t in self.params.items()]
        if self.bn_state is not None:
            out += [("running_mean", self.bn_state.mean), ("running_var", self.bn_state.var)]
        return out


@dataclass
class NetworkSpec:
    nodes: list[LayerNode]
    family: str
    config: dict
    head_index: int | None = None
    freeze_point: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.nodes)

    @property
    def dtype(self):
        for node in self.nodes:
            for t in node.params.values():
                return t.dtype
        return np.dtype(np.float32)

    def boundary_indices(self) -> list[int]:
        return [n.index for n in self.nodes if n.attrs.get("boundary")]

    def legal_freeze_points(self) -> list[int]:
        pts = {0, self.num_layers, *self.boundary_indices()}
        if self.head_index is not None:
            pts.add(self.head_index)
        return sorted(pts)

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [
            t
            for node in self.nodes
            if node.has_params and (node.trainable or not trainable_only)
            for t in node.params.values()
        ]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(t.size for t in self.parameters(trainable_only))

    def snapshot(self) -> list[np.ndarray]:
        """Copies of every parameter and running statistic, node by node."""
        return [a.copy() for node in self.nodes for _, a in node.arrays()]

    def node_snapshot(self, index: int) -> list[np.ndarray]:
        return [a.copy() for _, a in self.nodes[index].arrays()]

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkSpec":
        """Copy with every parameter and statistic cast to ``dtype``."""
        out = self.copy()
        for node in out.nodes:
            for name, t in node.params.items():
                node.params[name] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            if node.bn_state is not None:
                node.bn_state = BatchNormState(node.bn_state.mean.astype(dtype), node.bn_state.var.astype(dtype))
        return out

    def kind_indices(self, kind: str) -> list[int]:
        return [n.index for n in self.nodes if n.kind == kind]


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


class _GraphBuilder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.nodes: list[LayerNode] = []

    def _he_uniform(self, shape, fan_in):
        limit = np.sqrt(6.0 / max(fan_in, 1))
        return Tensor(self.rng.uniform(-limit, limit, size=shape).astype(self.dtype), requires_grad=True)

    def _zeros(self, n):
        return Tensor(np.zeros(n, dtype=self.dtype), requires_grad=True)

    def node(self, kind, inputs, params=None, bn_state=None, **attrs) -> int:
        idx = len(self.nodes)
        self.nodes.append(LayerNode(idx, kind, list(inputs), dict(params or {}), attrs, True, bn_state))
        return idx

    def conv(self, src, cin, cout, k=3, stride=1, padding=None):
        padding = k // 2 if padding is None else padding
        w = self._he_uniform((cout, cin, k, k), cin * k * k)
        return self.node("conv", [src], {"weight": w, "bias": self._zeros(cout)}, stride=stride, padding=padding)

    def conv_t(self, src, cin, cout, k=2, stride=2):
        w = self._he_uniform((cin, cout, k, k), cin * max(k // stride, 1) ** 2)
        return self.node("convT", [src], {"weight": w, "bias": self._zeros(cout)}, stride=stride)

    def bn(self, src, c):
        gamma = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
        return self.node(
            "batchnorm", [src], {"gamma": gamma, "beta": self._zeros(c)}, BatchNormState.fresh(c, self.dtype)
        )

    def act(self, src, kind):
        return self.node("activation", [src], fn=kind)

    def dense(self, src, nin, nout):
        w = self._he_uniform((nout, nin), nin)
        return self.node("dense", [src], {"weight": w, "bias": self._zeros(nout)})

    def conv_bn_relu(self, src, cin, cout, k=3, stride=1, padding=None):
        return self.act(self.bn(self.conv(src, cin, cout, k, stride, padding), cout), "relu")


def build_unet(
    depth: int = 3,
    base_channels: int = 8,
    in_channels: int = 1,
    out_channels: int = 1,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> NetworkSpec:
    """Same-padded U-Net ending in a 1x1 conv and sigmoid.

    Widths double per contracting level (``base * 2**level``) with a bottleneck
    at ``base * 2**depth``.
    """
    if depth < 1 or base_channels < 1 or in_channels < 1 or out_channels < 1:
        raise ConfigError(
            f"build_unet: depth, base_channels, in/out channels must be >= 1 "
            f"(got {depth}, {base_channels}, {in_channels}, {out_channels})"
        )
    b = _GraphBuilder(rng if rng is not None else derive_rng(0, "init", "unet"), dtype)
    x = b.node("input", [], channels=in_channels, divisor=2**depth)
    skips = []
    cin = in_channels
    for level in range(depth):
        c = base_channels * 2**level
        x = b.act(b.conv(x, cin, c), "relu")
        x = b.act(b.conv(x, c, c), "relu")
        skips.append((x, c))
        x = b.node("pool", [x], pool="max", window=2, boundary=True)
        cin = c
    c = base_channels * 2**depth
    x = b.act(b.conv(x, cin, c), "relu")
    x = b.act(b.conv(x, c, c), "relu")
    cin = c
    for skip, c in reversed(skips):
        up = b.conv_t(x, cin, c)
        x = b.node("concat", [up, skip], boundary=True)
        x = b.act(b.conv(x, 2 * c, c), "relu")
        x = b.act(b.conv(x, c, c), "relu")
        cin = c
    x = b.act(b.conv(x, cin, out_channels, k=1, padding=0), "sigmoid")
    b.node("output", [x])
    config = dict(depth=depth, base_channels=base_channels, in_channels=in_channels, out_channels=out_channels)
    return NetworkSpec(b.nodes, "unet", config)


def build_residual_classifier(
    blocks_per_stage: list[int] | tuple[int, ...] = (1, 1),
    base_channels: int = 8,
    n_classes: int = 3,
    in_channels: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> NetworkSpec:
    """Toy ResNet: stem, stages of basic blocks (stride 2 entering each later stage), GAP, dense, softmax."""
    blocks_per_stage = [int(n) for n in blocks_per_stage]
    if not blocks_per_stage or any(n < 1 for n in blocks_per_stage):
        raise ConfigError(f"build_residual_classifier: need a non-empty list of positive block counts, got {blocks_per_stage}")
    if n_classes < 2:
        raise ConfigError(f"build_residual_classifier: n_classes must be >= 2, got {n_classes}")
    if base_channels < 1:
        raise ConfigError(f"build_residual_classifier: base_channels must be >= 1, got {base_channels}")
    b = _GraphBuilder(rng if rng is not None else derive_rng(0, "init", "residual"), dtype)
    x = b.node("input", [], channels=in_channels, divisor=1)
    x = b.conv_bn_relu(x, in_channels, base_channels)
    cin = base_channels
    for stage, n_blocks in enumerate(blocks_per_stage):
        c = base_channels * 2**stage
        for blk in range(n_blocks):
            stride = 2 if stage > 0 and blk == 0 else 1
            branch = b.conv_bn_relu(x, cin, c, stride=stride)
            branch = b.bn(b.conv(branch, c, c), c)
            shortcut = x
            if stride != 1 or cin != c:
                shortcut = b.bn(b.conv(x, cin, c, k=1, stride=stride, padding=0), c)
            x = b.act(b.node("add", [branch, shortcut], boundary=True), "relu")
            cin = c
    x = b.node("pool", [x], pool="global", boundary=True)
    head = b.dense(x, cin, n_classes)
    x = b.act(head, "softmax")
    b.node("output", [x])
    config = dict(
        blocks_per_stage=blocks_per_stage, base_channels=base_channels, n_classes=n_classes, in_channels=in_channels
    )
    return NetworkSpec(b.nodes, "residual", config, head_index=head)


def build_inception_classifier(
    n_mixed_blocks: int = 2,
    base_channels: int = 8,
    n_classes: int = 3,
    in_channels: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> NetworkSpec:
    """Toy Inception: stem + pool, mixed blocks of 1x1 / 1x1->3x3 / avgpool->1x1 branches, GAP, dense, softmax.

    Mixed block ``j`` declares ``2 * base * (j + 1)`` output channels, split
    1/4, 1/2, 1/4 across the three branches.
    """
    if n_mixed_blocks < 1:
        raise ConfigError(f"build_inception_classifier: n_mixed_blocks must be >= 1, got {n_mixed_blocks}")
    if n_classes < 2:
        raise ConfigError(f"build_inception_classifier: n_classes must be >= 2, got {n_classes}")
    if base_channels < 1:
        raise ConfigError(f"build_inception_classifier: base_channels must be >= 1, got {base_channels}")
    b = _GraphBuilder(rng if rng is not None else derive_rng(0, "init", "inception"), dtype)
    x = b.node("input", [], channels=in_channels, divisor=2)
    x = b.conv_bn_relu(x, in_channels, base_channels)
    x = b.node("pool", [x], pool="max", window=2, boundary=True)
    cin = base_channels
    for j in range(n_mixed_blocks):
        cout = 2 * base_channels * (j + 1)
        c1 = max(cout // 4, 1)
        c3 = max(cout // 4, 1)
        c2 = cout - c1 - c3
        b1 = b.conv_bn_relu(x, cin, c1, k=1)
        b2 = b.conv_bn_relu(x, cin, max(c2 // 2, 1), k=1)
        b2 = b.conv_bn_relu(b2, max(c2 // 2, 1), c2, k=3)
        b3 = b.node("pool", [x], pool="avg", window=3, stride=1, padding=1)
        b3 = b.conv_bn_relu(b3, cin, c3, k=1)
        x = b.node("concat", [b1, b2, b3], boundary=True, out_channels=cout, branch_channels=[c1, c2, c3])
        cin = cout
    x = b.node("pool", [x], pool="global", boundary=True)
    head = b.dense(x, cin, n_classes)
    x = b.act(head, "softmax")
    b.node("output", [x])
    config = dict(
        n_mixed_blocks=n_mixed_blocks, base_channels=base_channels, n_classes=n_classes, in_channels=in_channels
    )
    return NetworkSpec(b.nodes, "inception", config, head_index=head)


BUILDERS = {
    "unet": build_unet,
    "residual": build_residual_classifier,
    "inception": build_inception_classifier,
}


def build(family: str, config: dict, rng=None, dtype=np.float32) -> NetworkSpec:
    try:
        builder = BUILDERS[family]
    except KeyError:
        raise ConfigError(f"unknown network family {family!r}; expected one of {sorted(BUILDERS)}") from None
    return builder(**config, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# head replacement and freezing
# ---------------------------------------------------------------------------


def replace_head(spec: NetworkSpec, n_classes: int, rng: np.random.Generator) -> NetworkSpec:
    """Copy of ``spec`` whose dense head is re-initialized with ``n_classes`` outputs."""
    if spec.head_index is None:
        raise ContractError(f"{spec.family} network has no dense head to replace")
    if n_classes < 2:
        raise ConfigError(f"replace_head: n_classes must be >= 2, got {n_classes}")
    out = spec.copy()
    head = out.nodes[out.head_index]
    nin = head.params["weight"].shape[1]
    dtype = head.params["weight"].dtype
    limit = np.sqrt(6.0 / nin)
    head.params["weight"] = Tensor(rng.uniform(-limit, limit, size=(n_classes, nin)).astype(dtype), requires_grad=True)
    head.params["bias"] = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)
    out.config = {**out.config, "n_classes": n_classes}
    return set_freeze_point(out, out.freeze_point)


def set_freeze_point(spec: NetworkSpec, k: int) -> NetworkSpec:
    """Freeze every parameterized node below ``k`` (in place; returns ``spec``).

    The dense head always stays trainable, so ``k = L`` means head-only
    fine-tuning. Frozen batchnorm layers also stop updating running statistics.
    """
    legal = spec.legal_freeze_points()
    if k not in legal:
        raise ConfigError(f"illegal freeze point {k} for {spec.family} network; legal points: {legal}")
    spec.freeze_point = k
    for node in spec.nodes:
        node.trainable = node.index >= k or node.index == spec.head_index
        for t in node.params.values():
            t.requires_grad = node.trainable
            if not node.trainable:
                t.grad = None
    return spec


def resolve_freeze_point(spec: NetworkSpec, name) -> int:
    """Map an ordinal name to a node index.

    Accepted: an integer index, ``"input"`` (0), ``"head"`` (head-only),
    ``"all"`` (L), or ``"block:N"`` for the N-th block boundary of the family
    (add node for residual, concat node for inception, pool for unet), 1-based.
    """
    if isinstance(name, (int, np.integer)):
        return int(name)
    text = str(name).strip().lower()
    if text.lstrip("-").isdigit():
        return int(text)
    if text in ("input", "0"):
        return 0
    if text == "head":
        if spec.head_index is None:
            raise ConfigError(f"{spec.family} network has no head; freeze point 'head' is undefined")
        return spec.head_index
    if text in ("all", "l", "end"):
        return spec.num_layers
    if text.startswith("block:"):
        kind = {"residual": "add", "inception": "concat", "unet": "pool"}[spec.family]
        blocks = spec.kind_indices(kind)
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad freeze point {name!r}; use block:N") from None
        if not 1 <= n <= len(blocks):
            raise ConfigError(f"freeze point {name!r}: network has {len(blocks)} {kind} blocks")
        return blocks[n - 1]
    raise ConfigError(f"unrecognized freeze point {name!r}; use an index, input, head, all, or block:N")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _run_node(node: LayerNode, args: list[Tensor], mode: str) -> Tensor:
    kind, a, p = node.kind, node.attrs, node.params
    if kind == "conv":
        return T.conv2d(args[0], p["weight"], p["bias"], a["stride"], a["padding"])
    if kind == "convT":
        return T.conv_transpose2d(args[0], p["weight"], p["bias"], a["stride"])
    if kind == "pool":
        if a["pool"] == "max":
            return T.maxpool2d(args[0], a["window"])
        if a["pool"] == "avg":
            return T.avgpool2d(args[0], a["window"], a["stride"], a["padding"])
        return T.global_avg_pool(args[0])
    if kind == "dense":
        return T.dense(args[0], p["weight"], p["bias"])
    if kind == "activation":
        return T.activation(args[0], a["fn"])
    if kind == "batchnorm":
        bn_mode = mode if node.trainable else "eval"
        return T.batchnorm2d(args[0], p["gamma"], p["beta"], node.bn_state, bn_mode)
    if kind == "concat":
        return T.concat(args, axis=1)
    if kind == "add":
        if args[0].shape != args[1].shape:
            raise DimensionError(f"add inputs have shapes {args[0].shape} and {args[1].shape}")
        return T.add(args[0], args[1])
    if kind == "output":
        return args[0]
    raise ContractError(f"unknown node kind {kind!r}")


def forward_pass(spec: NetworkSpec, x, mode: str = "eval") -> Tensor:
    """Evaluate ``spec`` on ``x`` (C x H x W or N x C x H x W)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=spec.dtype))
    elif x.dtype != spec.dtype:
        x = Tensor(x.data.astype(spec.dtype), requires_grad=x.requires_grad) if not x.requires_grad else x
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    inp = spec.nodes[0]
    if x.ndim != 4 or x.shape[1] != inp.attrs["channels"]:
        raise DimensionError(
            f"node 0 (input): expected N x {inp.attrs['channels']} x H x W, got shape {x.shape}"
        )
    div = inp.attrs.get("divisor", 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise DimensionError(f"node 0 (input): spatial extents {x.shape[2:]} must be divisible by {div}")
    values: list[Tensor | None] = [x]
    for node in spec.nodes[1:]:
        try:
            values.append(_run_node(node, [values[i] for i in node.inputs], mode))
        except DimensionError as exc:
            raise DimensionError(f"node {node.index} ({node.kind}): {exc}") from exc
    out = values[-1]
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def predict(spec: NetworkSpec, x) -> np.ndarray:
    """Eval-mode forward without graph recording."""
    with T.no_grad():
        return forward_pass(spec, x, "eval").data


def receptive_radius(spec: NetworkSpec) -> int:
    """Upper bound (input pixels) on how far an output pixel's support reaches.

    For a network with stride-aligned pooling this is the overlap needed for
    tiled inference to reproduce whole-image inference.
    """
    jump = [1.0] * spec.num_layers
    radius = [0.0] * spec.num_layers
    for node in spec.nodes[1:]:
        j = max(jump[i] for i in node.inputs)
        r = max(radius[i] for i in node.inputs)
        a = node.attrs
        if node.kind == "conv":
            k = node.params["weight"].shape[2]
            r += max(a["padding"], k - 1 - a["padding"]) * j
            j *= a["stride"]
        elif node.kind == "convT":
            k = node.params["weight"].shape[2]
            s = a["stride"]
            j /= s
            r += max(0, -(-(k - s) // s)) * j * s
        elif node.kind == "pool" and a["pool"] == "max":
            r += (a["window"] - 1) * j
            j *= a["window"]
        elif node.kind == "pool" and a["pool"] == "avg":
            r += max(a["padding"], a["window"] - 1 - a["padding"]) * j
            j *= a["stride"]
        jump[node.index], radius[node.index] = j, r
    return int(np.ceil(radius[-1]))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _descriptor(spec: NetworkSpec) -> bytes:
    desc = {
        "family": spec.family,
        "config": spec.config,
        "freeze_point": spec.freeze_point,
        "head_index": spec.head_index,
        "dtype": np.dtype(spec.dtype).name,
    }
    return json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()


def save_weights(spec: NetworkSpec, path) -> None:
    """Write ``spec`` as an NCW1 file (little-endian; see README for layout)."""
    dtype = _DTYPES[np.dtype(spec.dtype).name]
    buf = io.BytesIO()
    desc = _descriptor(spec)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", spec.num_layers))
    payloads = []
    for node in spec.nodes:
        arrays = node.arrays()
        buf.write(struct.pack("<IBI", node.index, _KIND_TAG[node.kind], len(arrays)))
        for _, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(struct.pack("<Q", len(raw)))
            payloads.append(raw)
    for raw in payloads:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, node=None) -> bytes:
        if self.pos + n > len(self.data):
            where = f" (node {node})" if node is not None else ""
            raise FormatError(f"truncated weight file while reading {what}{where}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, node=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, node))


def load_weights(path, into: NetworkSpec | None = None) -> NetworkSpec:
    """Read an NCW1 file.

    Without ``into`` the architecture is rebuilt from the embedded descriptor;
    with ``into`` the file must match that spec's node kinds and shapes. The
    target spec is never modified: a fresh copy is returned.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic bytes (not an NCW1 file)")
    version, desc_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    try:
        desc = json.loads(r.take(desc_len, "descriptor"))
        dtype = _DTYPES[desc["dtype"]]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt architecture descriptor") from exc
    (count,) = r.unpack("<I", "node count")
    table = []
    for expected in range(count):
        index, tag, n_arrays = r.unpack("<IBI", "node table", expected)
        if index != expected or tag >= len(NODE_KINDS):
            raise FormatError(f"{path}: corrupt node table entry (node {expected})")
        shapes = []
        for _ in range(n_arrays):
            (ndim,) = r.unpack("<B", "array rank", index)
            shape = r.unpack(f"<{ndim}I", "array shape", index)
            (nbytes,) = r.unpack("<Q", "array length", index)
            if nbytes != int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize:
                raise FormatError(f"{path}: byte length disagrees with shape (node {index})")
            shapes.append((shape, nbytes))
        table.append((index, NODE_KINDS[tag], shapes))
    arrays = []
    for index, _, shapes in table:
        arrays.append(
            [np.frombuffer(r.take(nb, "payload", index), dtype=dtype).reshape(shape) for shape, nb in shapes]
        )
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after payload")

    if into is None:
        try:
            target = build(desc["family"], desc["config"], rng=derive_rng(0, "load"), dtype=np.dtype(dtype).newbyteorder("="))
        except (ConfigError, TypeError) as exc:
            raise FormatError(f"{path}: descriptor does not describe a buildable network: {exc}") from exc
    else:
        target = into.copy()
    if target.num_layers != count:
        raise FormatError(f"{path}: file has {count} nodes, target network has {target.num_layers}")
    native = np.dtype(dtype).newbyteorder("=")
    for (index, kind, _), arrs, node in zip(table, arrays, target.nodes):
        names = [n for n, _ in node.arrays()]
        if node.kind != kind or len(names) != len(arrs):
            raise FormatError(f"{path}: node {index} is {kind!r} in file but {node.kind!r} in target")
        for name, arr in zip(names, arrs):
            current = dict(node.arrays())[name]
            if current.shape != arr.shape:
                raise FormatError(
                    f"{path}: node {index} {name} has shape {arr.shape} in file, {current.shape} in target"
                )
        values = [a.astype(native) for a in arrs]
        for name, val in zip(list(node.params), values):
            node.params[name] = Tensor(val.copy(), requires_grad=True)
        if node.bn_state is not None:
            node.bn_state = BatchNormState(values[-2].copy(), values[-1].copy())
    target.config = desc["config"] if into is None else target.config
    fp = desc["freeze_point"]
    if fp not in target.legal_freeze_points():
        raise FormatError(f"{path}: stored freeze point {fp} is not legal for this network")
    return set_freeze_point(target, fp)
