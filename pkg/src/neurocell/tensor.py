"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable operation builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the recorded graph topologically (the *tape*) and walks
it once in reverse.

Image tensors use the N x C x H x W layout. ``conv2d`` and friends also accept a
single C x H x W image and return an unbatched result.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError

LOG_CLAMP = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, weight surgery)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array plus an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# tape / backward
# ---------------------------------------------------------------------------


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes reachable from ``root``.

    Inputs always precede the records that consume them; ``root`` is last.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing buffers, so call ``zero_grad`` (or the
    optimizer step, which does it) between iterations.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean"
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis for N x C x H x W)."""
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat axis {axis}: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw, "concat")


# ---------------------------------------------------------------------------
# convolution machinery
# ---------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """N x C x H x W -> N x (C*kh*kw) x (Ho*Wo), rows ordered (c, i, j)."""
    n, c = xp.shape[:2]
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        v = v[:, :, ::stride, ::stride]
    ho, wo = v.shape[2:4]
    return v.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, stride: int, ho: int, wo: int, hp: int, wp: int):
    """Adjoint of :func:`_im2col`: scatter-add columns back onto an hp x wp canvas."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                :, :, i, j
            ]
    return out


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, channel_axis: int, what: str):
    if w.ndim != 4:
        raise DimensionError(f"{what}: weight must be 4-D, got shape {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise DimensionError(
            f"{what}: input channel axis (axis 1, extent {x.shape[1]}) does not match "
            f"weight axis {channel_axis} (extent {w.shape[channel_axis]})"
        )
    out_c = w.shape[1 - channel_axis]
    if b is not None and b.shape != (out_c,):
        raise DimensionError(f"{what}: bias shape {b.shape} does not match output channels {out_c}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C x H x W or N x C x H x W) with ``weight`` (O x C x kh x kw)."""
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    x, squeeze = _batched(x)
    _check_conv(x.data, weight.data, None if bias is None else bias.data, 1, "conv2d")
    n, c, h, w_ = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w_ + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: padded input {h + 2 * padding}x{w_ + 2 * padding} (axes 2,3) smaller than kernel {kh}x{kw}"
        )
    xp = _pad(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w_ + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2)
        gxp = _col2im(gcols, c, kh, kw, stride, ho, wo, h + 2 * padding, w_ + 2 * padding)
        gx = gxp[:, :, padding : padding + h, padding : padding + w_]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(_result(out, parents, bw, "conv2d"), squeeze)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is Cin x Cout x kh x kw.

    With the same kernel this is the adjoint of :func:`conv2d` (no padding):
    output extent is (H - 1) * stride + kh.
    """
    if stride < 1:
        raise ConfigError(f"conv_transpose2d: stride must be >= 1 (got {stride})")
    x, squeeze = _batched(x)
    _check_conv(x.data, weight.data, None if bias is None else bias.data, 0, "conv_transpose2d")
    n, ci, h, w_ = x.shape
    _, co, kh, kw = weight.shape
    ho = (h - 1) * stride + kh
    wo = (w_ - 1) * stride + kw
    wmat = weight.data.reshape(ci, -1)
    xcols = x.data.reshape(n, ci, h * w_)
    out = _col2im(np.matmul(wmat.T, xcols), co, kh, kw, stride, h, w_, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    def bw(g):
        gcols = _im2col(g, kh, kw, stride)
        gx = np.matmul(wmat, gcols).reshape(x.shape)
        gw = np.matmul(xcols, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(_result(out, parents, bw, "conv_transpose2d"), squeeze)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first maximum in row-major order."""
    x, squeeze = _batched(x)
    n, c, h, w_ = x.shape
    if h % window or w_ % window:
        raise DimensionError(
            f"maxpool2d: spatial extents {h}x{w_} (axes 2,3) not divisible by window {window}"
        )
    ho, wo = h // window, w_ // window
    blocks = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w_),)

    return _unbatch(_result(out, (x,), bw, "maxpool2d"), squeeze)


def avgpool2d(x: Tensor, window: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling over zero-padded windows (padding counts toward the mean)."""
    x, squeeze = _batched(x)
    n, c, h, w_ = x.shape
    xp = _pad(x.data, padding)
    v = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = v.shape[2:4]
    out = v.mean(axis=(-2, -1))
    area = window * window

    def bw(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        gs = g / area
        for i in range(window):
            for j in range(window):
                gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gs
        return (gp[:, :, padding : padding + h, padding : padding + w_],)

    return _unbatch(_result(out, (x,), bw, "avgpool2d"), squeeze)


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C."""
    x, squeeze = _batched(x)
    n, c, h, w_ = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w_), x.shape).copy(),)

    res = _result(out, (x,), bw, "global_avg_pool")
    return reshape(res, (c,)) if squeeze else res


# ---------------------------------------------------------------------------
# dense, activations, normalization
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for x of shape N or B x N; weight is M x N."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"dense: input last axis (extent {x.shape[-1]}) does not match weight axis 1 "
            f"(weight shape {weight.shape})"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias shape {bias.shape} does not match weight axis 0 ({weight.shape[0]})")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the final axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization of N x C x H x W input.

    ``train`` normalizes with batch statistics and updates ``state`` in place;
    ``eval`` uses the running statistics.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected N x C x H x W, got {x.shape}")
    n, c, h, w_ = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: channel axis 1 has extent {c}, gamma/beta have shapes {gamma.shape}/{beta.shape}"
        )
    shape = (1, c, 1, 1)
    if mode == "train":
        count = n * h * w_
        if count < 2:
            raise DimensionError(f"batchnorm2d: degenerate batch (N*H*W = {count} < 2) in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean[...] = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mu
        state.var[...] = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * var * count / (count - 1)
    elif mode == "eval":
        mu, var, count = state.mean, state.var, None
    else:
        raise ConfigError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype, copy=False)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if count is None:
            gx = gxhat * inv_std.reshape(shape)
        else:
            gx = (
                inv_std.reshape(shape)
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(prediction: Tensor, target, form: str = "pixelwise_binary") -> Tensor:
    """Mean cross-entropy.

    ``pixelwise_binary``: prediction and target are same-shaped probability arrays.
    ``categorical``: prediction is K or B x K probabilities, target holds class indices.
    """
    p = prediction.data
    if form == "pixelwise_binary":
        t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
        if t.shape != p.shape:
            raise DimensionError(f"cross_entropy: prediction shape {p.shape} != target shape {t.shape}")
        pc = np.maximum(p, LOG_CLAMP)
        qc = np.maximum(1.0 - p, LOG_CLAMP)
        loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(qc))
        n = p.size

        def bw(g):
            # clamped denominators keep saturated pixels trainable
            return (g * (-(t / pc) + (1.0 - t) / qc) / n,)

    elif form == "categorical":
        idx = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64)
        p2 = p.reshape(-1, p.shape[-1])
        idx = idx.reshape(-1)
        if idx.shape[0] != p2.shape[0]:
            raise DimensionError(
                f"cross_entropy: {p2.shape[0]} prediction rows but {idx.shape[0]} target indices"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= p2.shape[1]):
            raise DimensionError(f"cross_entropy: target index out of range for {p2.shape[1]} classes")
        rows = np.arange(p2.shape[0])
        picked = np.maximum(p2[rows, idx], LOG_CLAMP)
        loss = -np.mean(np.log(picked))
        n = p2.shape[0]

        def bw(g):
            gp = np.zeros_like(p2)
            gp[rows, idx] = -g / (picked * n)
            return (gp.reshape(p.shape),)

    else:
        raise ConfigError(f"cross_entropy: unknown form {form!r}")
    return _result(np.asarray(loss, dtype=p.dtype), (prediction,), bw, f"cross_entropy[{form}]")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def optimizer_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """SGD with momentum: ``v = m*v + g; p -= lr*v``; gradients are cleared afterwards.

    Velocity buffers are keyed by position in ``params``, so pass parameters in
    a stable order.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter #{i} (shape {p.shape}) has no gradient")
    for i, p in enumerate(params):
        v = state.velocity.get(i)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p.data)
        v = state.momentum * v + p.grad
        state.velocity[i] = v.astype(p.dtype, copy=False)
        p.data = (p.data - state.learning_rate * state.velocity[i]).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for each element of ``x``.

    ``fn`` is evaluated with graph recording off. ``indices`` restricts the
    probe to a subset of flat positions (the rest stay zero).
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(x).data)
            flat[i] = orig - h
            fm = float(fn(x).data)
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a|| + ||n||, tiny)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
