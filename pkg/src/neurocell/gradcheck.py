"""Finite-difference verification of every differentiable operation and network family.

Each check builds a scalar ``sum(op(inputs) * W)`` with a fixed random weight
``W`` (so softmax-like ops do not have trivially zero gradients), runs
:func:`~neurocell.tensor.backward` and compares against central differences
in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .netgraph import build_inception_classifier, build_residual_classifier, build_unet, derive_rng, forward_pass
from .tensor import Tensor

# tolerance per check; batchnorm and whole networks get the looser bound
TOLERANCES = {"batchnorm2d": 1e-3, "unet": 1e-3, "residual": 1e-3, "inception": 1e-3}
DEFAULT_TOL = 1e-4
# denominators below this count as noise-level gradients (e.g. conv bias feeding batchnorm)
NOISE_FLOOR = 1e-6
H = 1e-5
# smooth points agree to ~1e-9 between steps h and h/2; kink crossings differ by ~1e-2
KINK_TOL = 1e-6


def _leaf(rng, *shape, low=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 1 - low, shape)
    return Tensor(data, requires_grad=True)


def _probe(f, t: Tensor, i: int, h: float) -> float:
    return float(T.finite_difference_grad(f, t, h=h, indices=[i]).reshape(-1)[i])


def check(
    fn: Callable[..., Tensor],
    inputs: list[Tensor],
    rng: np.random.Generator,
    probes: int | None = None,
    stats: dict | None = None,
) -> float:
    """Largest per-input relative error between backward and central differences.

    ``probes`` limits the finite-difference evaluation to that many random
    elements per input (all elements when ``None``). Elements whose estimate
    changes when the step is halved sit within ``H`` of a relu/max kink; they
    are skipped and replaced by another draw. ``stats["kinks"]`` counts them.
    """
    with T.no_grad():
        out_shape = fn(*inputs).shape
    weight = rng.standard_normal(out_shape)

    def scalar(*args):
        return T.tsum(T.mul(fn(*args), Tensor(weight)))

    for t in inputs:
        t.grad = None
    T.backward(scalar(*inputs))
    worst = 0.0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue

        def f(x, pos=pos):
            args = list(inputs)
            args[pos] = x
            return scalar(*args)

        want = t.size if probes is None else min(probes, t.size)
        order = range(t.size) if probes is None else rng.permutation(t.size)
        analytic_all = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)
        analytic, numeric = [], []
        for i in order:
            if len(numeric) == want:
                break
            coarse, fine = _probe(f, t, int(i), H), _probe(f, t, int(i), H / 2)
            if abs(coarse - fine) > KINK_TOL * max(1.0, abs(fine)):
                if stats is not None:
                    stats["kinks"] = stats.get("kinks", 0) + 1
                continue
            analytic.append(analytic_all[i])
            numeric.append(coarse)
        analytic, numeric = np.array(analytic), np.array(numeric)
        err = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic) + np.linalg.norm(numeric), NOISE_FLOOR
        )
        worst = max(worst, float(err))
    return worst


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    bn_state = T.BatchNormState.fresh(3, np.float64)
    targets = rng.integers(0, 3, size=4)
    return {
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), [_leaf(rng, 2, 8, 8), _leaf(rng, 4, 2, 3, 3), _leaf(rng, 4)]),
        "conv2d_stride2": (
            lambda x, w, b: T.conv2d(x, w, b, 2, 0),
            [_leaf(rng, 2, 2, 7, 7), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)],
        ),
        "conv_transpose2d": (
            lambda x, w, b: T.conv_transpose2d(x, w, b, 2),
            [_leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2)],
        ),
        "maxpool2d": (lambda x: T.maxpool2d(x, 2), [_leaf(rng, 1, 4, 4)]),
        "avgpool2d": (lambda x: T.avgpool2d(x, 3, 1, 1), [_leaf(rng, 2, 2, 5, 5)]),
        "global_avg_pool": (T.global_avg_pool, [_leaf(rng, 2, 3, 4, 4)]),
        "dense": (T.dense, [_leaf(rng, 3, 5), _leaf(rng, 4, 5), _leaf(rng, 4)]),
        "relu": (T.relu, [_leaf(rng, 3, 7)]),
        "sigmoid": (T.sigmoid, [_leaf(rng, 3, 7)]),
        "softmax": (T.softmax, [_leaf(rng, 3, 7)]),
        "concat": (lambda a, b: T.concat([a, b], 1), [_leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 1, 3, 3)]),
        "add_mul": (lambda a, b: T.mul(T.add(a, b), a), [_leaf(rng, 3, 4), _leaf(rng, 1, 4)]),
        "batchnorm2d": (
            lambda x, g, b: T.batchnorm2d(x, g, b, bn_state, "train"),
            [_leaf(rng, 2, 3, 4, 4), _leaf(rng, 3), _leaf(rng, 3)],
        ),
        "cross_entropy_pixelwise": (
            lambda z, t: T.cross_entropy(T.sigmoid(z), t, "pixelwise_binary"),
            [_leaf(rng, 1, 6, 6), Tensor(rng.uniform(0, 1, (1, 6, 6)))],
        ),
        "cross_entropy_categorical": (
            lambda z: T.cross_entropy(T.softmax(z), targets, "categorical"),
            [_leaf(rng, 4, 3)],
        ),
    }


def _network_cases(rng: np.random.Generator) -> dict:
    init = derive_rng(int(rng.integers(2**31)), "gradcheck")
    return {
        "unet": (build_unet(2, 4, 1, 1, rng=init, dtype=np.float64), (1, 1, 16, 16)),
        "residual": (build_residual_classifier([1, 1], 4, 3, rng=init, dtype=np.float64), (2, 3, 8, 8)),
        "inception": (build_inception_classifier(2, 4, 3, rng=init, dtype=np.float64), (2, 3, 8, 8)),
    }


def network_error(spec, x: Tensor, rng: np.random.Generator, probes: int | None = 6, stats: dict | None = None) -> float:
    """Relative gradient error over the input and every parameter tensor of ``spec``.

    Finite differences perturb the parameter arrays in place, so the closure
    only needs the input; train-mode batchnorm output ignores running stats.
    """
    return check(lambda x, *params: forward_pass(spec, x, "train"), [x, *spec.parameters()], rng, probes, stats)


def run_suite(
    seeds: int = 20, probes: int | None = 6, include_networks: bool = True, stats: dict | None = None
) -> dict[str, float]:
    """Max relative error per check across ``seeds`` random draws."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = derive_rng(seed, "gradcheck-suite")
        for name, (fn, inputs) in _op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check(fn, inputs, rng, None, stats))
        if include_networks:
            for name, (spec, shape) in _network_cases(rng).items():
                x = Tensor(rng.standard_normal(shape), requires_grad=True)
                worst[name] = max(worst.get(name, 0.0), network_error(spec, x, rng, probes, stats))
    return worst


def tolerance(name: str) -> float:
    return TOLERANCES.get(name, DEFAULT_TOL)
