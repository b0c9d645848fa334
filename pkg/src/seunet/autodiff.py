"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Graph` only; with no
graph active they just compute values, which is how evaluation runs.
Feature maps are ``(N, C, H, W)``; scale-grouped maps add a group axis,
``(N, G, C, H, W)``. Spatial ops act on the last two axes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._recorded

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Graph:
    """Ordered record of operations; backward walks it in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        out._recorded = True
        self.nodes.append(Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor):
        if loss.data.shape != () and loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            for t, g in zip(node.inputs, node.backward(gout)):
                if g is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad += g
                elif id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, graph: Graph | None = None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf requiring grad."""
    graph = graph or current_graph()
    if graph is None:
        raise RuntimeError("no graph recorded; run the forward pass inside `with Graph():`")
    graph.backward(loss)


def _emit(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a graph is active and needed."""
    graph = current_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        graph.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    # only scalar operands broadcast
    return g if g.shape == shape else np.sum(g).reshape(shape)


# -- elementwise / scalar ops ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def reciprocal(a) -> Tensor:
    r = 1.0 / a.data
    return _emit(r, (a,), lambda g: (-g * r * r,))


def tanh(a) -> Tensor:
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a) -> Tensor:
    x = a.data
    return _emit(np.logaddexp(0.0, x), (a,), lambda g: (g / (1.0 + np.exp(-x)),))


def exp(a) -> Tensor:
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def sum(a) -> Tensor:  # noqa: A001
    return _emit(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    n = a.data.size
    return _emit(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),))


def relu(a) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax of a 1D vector."""
    z = np.exp(a.data - np.max(a.data))
    p = z / np.sum(z)
    return _emit(p, (a,), lambda g: (p * (g - np.dot(g, p)),))


def take(a, index: int, axis: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit(np.take(a.data, index, axis=axis), (a,), bwd)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    data = np.stack([t.data for t in items], axis=axis)
    return _emit(data, items,
                 lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(items))))


def weighted_sum(values: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_k weights[k] * values[k] for scalar values and a weight vector."""
    return sum(mul(stack(values), weights))


def concat(items: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in items], axis=axis)
    return _emit(data, items, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- spatial ops ---------------------------------------------------------------

def _check_odd(k):
    if k % 2 == 0:
        raise ValueError(f"kernel side must be odd, got {k}")


def conv2d_array(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-size zero-padded cross-correlation.

    ``x``: (N, Cin, H, W); ``w``: (Cout, Cin, t, t) -> (N, Cout, H, W).
    Processes one kernel row at a time so large kernels never build a full
    im2col buffer.
    """
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    _check_odd(kh)
    _check_odd(kw)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, h, wd, cout))
    for dy in range(kh):
        win = sliding_window_view(xp[:, :, dy:dy + h, :], kw, axis=3)  # N,Cin,H,W,kw
        out += np.tensordot(win, w[:, :, dy, :], axes=([1, 4], [1, 2]))
    return out.transpose(0, 3, 1, 2).copy()


def _conv2d_weight_grad(x, g, kh, kw):
    n, cin, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gw = np.empty((g.shape[1], cin, kh, kw))
    for dy in range(kh):
        win = sliding_window_view(xp[:, :, dy:dy + h, :], kw, axis=3)
        gw[:, :, dy, :] = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Zero-padded 'same' cross-correlation with an odd square kernel."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    out = conv2d_array(xd, w.data)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = None
        if x.requires_grad:
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = conv2d_array(g4, np.ascontiguousarray(wf))
            gx = gx[0] if squeeze else gx
        gw = _conv2d_weight_grad(xd, g4, *w.shape[2:]) if w.requires_grad else None
        return gx, gw

    return _emit(out[0] if squeeze else out, (x, w), bwd)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing: (N, Cin, H, W) x (Cout, Cin) [+ (Cout,)]."""
    out = np.einsum("oc,nchw->nohw", w.data, x.data)
    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = np.einsum("oc,nohw->nchw", w.data, g) if x.requires_grad else None
        gw = np.einsum("nohw,nchw->oc", g, x.data)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, bwd)


def max_pool2x2(a: Tensor) -> Tensor:
    """2x2 max-pool, stride 2, over the last two axes; ties go to the first
    element in row-major order."""
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = a.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(a.shape),)

    return _emit(out, (a,), bwd)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)

    def bwd(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1)),)

    return _emit(out, (a,), bwd)


def softmax_channels(a: Tensor, axis: int = 1) -> Tensor:
    z = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    p = z / np.sum(z, axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _emit(p, (a,), bwd)


def _check_one_hot(target: np.ndarray, axis: int):
    ok = np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=axis) == 1)
    if not ok:
        raise ValueError("cross_entropy target must be one-hot along the class axis")


def cross_entropy(probs: Tensor, target, axis: int = 1) -> Tensor:
    """Mean over pixels of -sum_c y_c log p_c, with log floored at 1e-12.

    ``probs`` is (N, C, H, W) or (C, H, W) with classes on ``axis``.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {probs.shape}")
    _check_one_hot(y, axis)
    p = probs.data
    n_pix = p.size // p.shape[axis]
    clipped = np.maximum(p, LOG_FLOOR)
    loss = -np.sum(y * np.log(clipped)) / n_pix

    def bwd(g):
        return (np.where(p > LOG_FLOOR, -y / clipped, 0.0) * (g / n_pix),)

    return _emit(np.asarray(loss), (probs,), bwd)
