"""Dense tensors and a reverse-mode autodiff tape.

Only the operations the fusion network needs are provided. Tensors are
channel-first single samples, ``[C, M, N, D]``; there is no batch axis.
"""
from __future__ import annotations

import itertools
import os
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "no_grad",
    "record",
    "backward",
    "conv3d",
    "softmax_over_classes",
    "cross_entropy",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "scale_channels",
    "concat",
    "global_avg_pool",
    "linear",
    "sum_all",
    "PROB_EPS",
]

PROB_EPS = 1e-7

# Set UAFUSE_DEBUG=1 to check every forward result for NaN/Inf.
CHECK_FINITE = os.environ.get("UAFUSE_DEBUG", "") not in ("", "0")

_PRECISIONS = {np.dtype(np.float64): "double", np.dtype(np.float32): "single"}
_DTYPES = {"double": np.float64, "single": np.float32}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the autodiff tape."""


class Tensor:
    """Real array with an optional gradient slot bound to a tape."""

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        if precision is not None:
            arr = np.asarray(data, dtype=_DTYPES[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in _PRECISIONS:
                arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return _PRECISIONS[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Append-only record of operations; replayed once in reverse by ``backward``."""

    _ids = itertools.count(1)

    def __init__(self):
        self.id = next(Tape._ids)
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward; re-run the forward pass")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        self.nodes.clear()


_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


class no_grad:
    """Suspend recording: ops inside produce constant tensors."""

    def __enter__(self):
        self._saved = list(_STACK)
        _STACK.clear()

    def __exit__(self, *exc):
        _STACK[:] = self._saved


def record(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result and, when any input needs a gradient, put it on the active tape.

    ``fn`` maps the output gradient to one gradient (or None) per input.
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    tape = active_tape()
    out = Tensor(data)
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.requires_grad and t._is_leaf:
            t.tape_id = tape.id
            t._tape = tape
    out.requires_grad = True
    out._is_leaf = False
    out.tape_id = tape.id
    out._tape = tape
    tape.nodes.append(_Node(out, tuple(inputs), fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that fed ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not attached to any tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# convolution

_COLS_BUDGET = 1 << 17  # elements per im2col chunk; small chunks stay cache-resident


def _taps(k: int):
    return list(itertools.product(range(k), repeat=3))


def _slab(rows: int, plane: int, depth: int) -> int:
    return max(1, min(depth, _COLS_BUDGET // max(1, rows * plane)))


def _columns(xp: np.ndarray, x0: int, s: int, k: int, d: int, out_shape) -> np.ndarray:
    _, n, dd = out_shape
    ci = xp.shape[0]
    cols = np.empty((k ** 3, ci, s, n, dd), dtype=xp.dtype)
    for t, (i, j, l) in enumerate(_taps(k)):
        cols[t] = xp[:, x0 + i * d: x0 + i * d + s, j * d: j * d + n, l * d: l * d + dd]
    return cols.reshape(k ** 3 * ci, s * n * dd)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def _correlate(x: np.ndarray, w: np.ndarray, d: int) -> np.ndarray:
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    m, n, dd = x.shape[1:]
    if k == 1:
        return (w.reshape(co, ci) @ x.reshape(ci, -1)).reshape(co, m, n, dd)
    xp = _pad(x, d * (k - 1) // 2)
    wm = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(co, -1)
    out = np.empty((co, m, n, dd), dtype=np.result_type(x, w))
    slab = _slab(ci * k ** 3, n * dd, m)
    for x0 in range(0, m, slab):
        s = min(slab, m - x0)
        cols = _columns(xp, x0, s, k, d, (m, n, dd))
        out[:, x0:x0 + s] = (wm @ cols).reshape(co, s, n, dd)
    return out


def _weight_grad(x: np.ndarray, g: np.ndarray, k: int, d: int) -> np.ndarray:
    co, ci = g.shape[0], x.shape[0]
    m, n, dd = x.shape[1:]
    if k == 1:
        return (g.reshape(co, -1) @ x.reshape(ci, -1).T).reshape(co, ci, 1, 1, 1)
    xp = _pad(x, d * (k - 1) // 2)
    gw = np.zeros((co, k ** 3 * ci), dtype=np.result_type(x, g))
    slab = _slab(ci * k ** 3, n * dd, m)
    for x0 in range(0, m, slab):
        s = min(slab, m - x0)
        cols = _columns(xp, x0, s, k, d, (m, n, dd))
        gw += g[:, x0:x0 + s].reshape(co, -1) @ cols.T
    return gw.reshape(co, k, k, k, ci).transpose(0, 4, 1, 2, 3)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dilated 3D cross-correlation with "same" zero padding, stride 1."""
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise DimensionError(f"conv3d expects input [C,M,N,D] and weight [Co,Ci,k,k,k], got {x.shape} and {weight.shape}")
    co, ci, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"conv3d kernel must be cubic with odd extent, got {weight.shape[2:]}")
    if x.shape[0] != ci:
        raise DimensionError(f"conv3d: input has {x.shape[0]} channels but weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} does not match {co} output channels")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    xd, wd = x.data, weight.data
    out = _correlate(xd, wd, dilation)
    if bias is not None:
        out += bias.data.reshape(co, 1, 1, 1)

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _correlate(g, wf, dilation)
        if weight.requires_grad:
            gw = _weight_grad(xd, g, k, dilation)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(co, -1).sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, fn)


# ---------------------------------------------------------------------------
# classification head ops

def softmax_over_classes(logits: Tensor) -> Tensor:
    if logits.shape[0] < 2:
        raise DimensionError("softmax needs at least two classes")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return record(p, (logits,), fn)


def cross_entropy(prob: Tensor, label: np.ndarray, eps: float = PROB_EPS) -> Tensor:
    """Mean over voxels of -log prob[label], with prob floored at ``eps``.

    The floor only guards the log; the gradient passes straight through it so
    confidently wrong voxels keep a learning signal.
    """
    label = np.asarray(label)
    c = prob.shape[0]
    if label.shape != prob.shape[1:]:
        raise DimensionError(f"label grid {label.shape} does not match probability map {prob.shape[1:]}")
    bad = (label < 0) | (label >= c)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {int(label[idx])} at voxel {idx} is outside [0, {c})")
    lab = label.astype(np.intp)[None]
    picked = np.take_along_axis(prob.data, lab, axis=0)[0]
    safe = np.maximum(picked, eps)
    nvox = picked.size
    loss = np.asarray(-np.log(safe).sum() / nvox, dtype=prob.data.dtype)

    def fn(g):
        gp = np.zeros_like(prob.data)
        np.put_along_axis(gp, lab, (-g.reshape(()) / (safe * nvox))[None], axis=0)
        return (gp,)

    return record(loss, (prob,), fn)


# ---------------------------------------------------------------------------
# elementwise, reductions and channel maps

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def _field_broadcast(a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is a [1, ...] scalar field to spread across ``a``'s channels."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == a.data.ndim and b.shape[0] == 1 and b.shape[1:] == a.shape[1:]:
        return True
    raise DimensionError(f"mul: cannot broadcast {b.shape} against {a.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a single-channel field shared by all of ``a``'s channels."""
    if a.shape[0] == 1 and b.shape[0] != 1 and a.shape[1:] == b.shape[1:]:
        a, b = b, a
    spread = _field_broadcast(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = g * bd if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * ad
            if spread:
                gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return record(ad * bd, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel ``i`` of ``x`` by the scalar ``s[i]``."""
    if s.shape != (x.shape[0],):
        raise DimensionError(f"scale_channels: weights {s.shape} do not match {x.shape[0]} channels")
    view = (-1,) + (1,) * (x.data.ndim - 1)
    xd, sd = x.data, s.data

    def fn(g):
        gx = g * sd.reshape(view) if x.requires_grad else None
        gs = (g * xd).reshape(x.shape[0], -1).sum(axis=1) if s.requires_grad else None
        return gx, gs

    return record(xd * sd.reshape(view), (x, s), fn)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis, first operand first."""
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    tail = xs[0].shape[1:]
    for t in xs[1:]:
        if t.shape[1:] != tail:
            raise DimensionError(f"concat: spatial shapes {tail} and {t.shape[1:]} differ")
    out = np.concatenate([t.data for t in xs], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record(out, xs, fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[C, M, N, D] -> [C] spatial mean."""
    c = x.shape[0]
    nvox = x.size // c
    out = x.data.reshape(c, -1).mean(axis=1)

    def fn(g):
        return (np.broadcast_to((g / nvox).reshape((c,) + (1,) * (x.data.ndim - 1)), x.shape).copy(),)

    return record(out, (x,), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected map on a channel vector: [in] -> [out]."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to vector {x.shape}")
    out = weight.data @ x.data
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
    xd, wd = x.data, weight.data

    def fn(g):
        return wd.T @ g, np.outer(g, xd), g

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g.reshape(()), dtype=x.data.dtype),))
