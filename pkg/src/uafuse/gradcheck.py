"""Central finite-difference checks for every differentiable op.

Each registered case builds small random double-precision inputs from a seed
and a scalar objective ``sum(op(...) * R)`` with a fixed random projection R.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

STEP = 1e-4
REL_TOL = 1e-3
ABS_FLOOR = 1e-6


@dataclass
class GradCase:
    name: str
    # seed -> (inputs needing gradients, function of those inputs returning a Tensor)
    build: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]


REGISTRY: dict[str, GradCase] = {}


def register(name: str):
    def deco(build):
        REGISTRY[name] = GradCase(name, build)
        return build
    return deco


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _conv_case(ci, co, k, dilation, size):
    def build(rng):
        x = rng.standard_normal((ci, size, size, size))
        w = rng.standard_normal((co, ci, k, k, k)) * 0.3
        b = rng.standard_normal(co)
        return [x, w, b], lambda x, w, b: T.conv3d(x, w, b, dilation=dilation)
    return build


register("conv3d")(_conv_case(2, 3, 3, 1, 4))
register("conv3d_dilated")(_conv_case(2, 2, 3, 2, 5))
register("conv3d_1x1")(_conv_case(3, 2, 1, 1, 3))


@register("softmax_over_classes")
def _softmax(rng):
    return [rng.standard_normal((4, 3, 3, 3))], T.softmax_over_classes


@register("cross_entropy")
def _xent(rng):
    logits = rng.standard_normal((3, 3, 3, 2))
    prob = np.exp(logits) / np.exp(logits).sum(axis=0)
    label = rng.integers(0, 3, size=(3, 3, 2))
    return [prob], lambda p: T.cross_entropy(p, label)


@register("relu")
def _relu(rng):
    return [_away_from_zero(rng, (2, 3, 3, 3))], T.relu


@register("sigmoid")
def _sigmoid(rng):
    return [rng.standard_normal((2, 3, 3, 3))], T.sigmoid


@register("add")
def _add(rng):
    return [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3))], T.add


@register("mul")
def _mul(rng):
    return [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3))], T.mul


@register("mul_field_broadcast")
def _mul_field(rng):
    return [rng.standard_normal((3, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))], T.mul


@register("scale_channels")
def _scale_channels(rng):
    return [rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3)], T.scale_channels


@register("concat")
def _concat(rng):
    return [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((3, 3, 3, 3))], lambda a, b: T.concat([a, b])


@register("global_avg_pool")
def _gap(rng):
    return [rng.standard_normal((3, 3, 4, 2))], T.global_avg_pool


@register("linear")
def _linear(rng):
    return [rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal(3)], T.linear


@register("uncertainty")
def _uncertainty(rng):
    from .fusion import uncertainty_tensor

    # composed with softmax: a finite-difference step must keep the input a valid distribution
    logits = rng.standard_normal((3, 3, 3, 3)) * 0.5
    return [logits], lambda z: uncertainty_tensor(T.softmax_over_classes(z), differentiable=True)


def _objective(fn, arrays, proj):
    out = fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * proj))


def check_case(case: GradCase, seed: int) -> float:
    """Largest floored relative error between tape and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    arrays, fn = case.build(rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        proj = rng.standard_normal(out.shape)
        loss = T.sum_all(T.mul(out, Tensor(proj)))
        tape.backward(loss)

    worst = 0.0
    for a, t in zip(arrays, ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            up = _objective(fn, arrays, proj)
            flat[i] = orig - STEP
            down = _objective(fn, arrays, proj)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * STEP)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def run(names=None, seeds: int = 20, tol: float = REL_TOL) -> dict[str, tuple[bool, float]]:
    names = list(REGISTRY) if names is None else list(names)
    report = {}
    for name in names:
        worst = max(check_case(REGISTRY[name], s) for s in range(seeds))
        report[name] = (worst <= tol, worst)
    return report
