"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the reconstruction network needs are provided. Each op
records its inputs and a closure that pushes the output gradient back to
them; ``backward`` walks the recorded graph once in reverse topological order
and then releases it.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, SursError


class GraphError(SursError):
    """backward() called without a recorded forward pass."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "_back", "name", "requires_grad", "_done")

    def __init__(self, data, parents=(), back=None, name=None, requires_grad=False):
        self.data = data
        self.grad = None
        self.parents = parents
        self._back = back
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name) -> Tensor:
    return Tensor(np.asarray(data), name=name, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _t(a, b)
    if not isinstance(b, Tensor):
        b = _t(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return Tensor(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))
    return Tensor(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))
    return Tensor(a.data * b.data, (a, b), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, 2 * a.data * g)
    return Tensor(a.data * a.data, (a,), back)


def absolute(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, np.sign(a.data) * g)
    return Tensor(np.abs(a.data), (a,), back)


def total(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, np.broadcast_to(g, a.shape))
    return Tensor(np.asarray(a.data.sum(), dtype=a.dtype), (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _acc(a, np.broadcast_to(g / n, a.shape))
    return Tensor(np.asarray(a.data.sum() / n, dtype=a.dtype), (a,), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _acc(a, g * c)
    return Tensor(a.data * a.dtype.type(c), (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    s = a.dtype.type(slope)

    def back(g):
        _acc(a, np.where(pos, g, g * s))
    return Tensor(np.where(pos, a.data, a.data * s), (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)

    def back(g):
        _acc(a, g * y * (1 - y))
    return Tensor(y, (a,), back)


def concat(ts, axis=-1) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, s, e in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _acc(t, g[tuple(sl)])
    return Tensor(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        _acc(a, g.reshape(a.shape))
    return Tensor(a.data.reshape(shape), (a,), back)


def index_rows(a: Tensor, idx) -> Tensor:
    """a[idx] along the first axis."""
    idx = np.asarray(idx)

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)
    return Tensor(a.data[idx], (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(x: Tensor, w: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
    return Tensor(x.data @ w.data, (x, w), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 (or k x k) convolution, NCHW, zero padding k // 2."""
    B, C, H, W = x.shape
    O, C2, k, _ = w.shape
    if C2 != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {C2}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, C * k * k)
    out = (cols @ wm.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            _acc(w, (g2.T @ cols).reshape(w.shape))
        if b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _acc(x, dxp[:, :, p:p + H, p:p + W])
    return Tensor(np.ascontiguousarray(out), (x, w, b), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling, NCHW."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        B, C, H, W = x.shape
        _acc(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))
    return Tensor(out, (x,), back)


def bilinear_weights(u, v, H, W):
    """Corner indices and weights for grid-node coordinates (u = column, v = row).

    Nodes sit at integer coordinates; queries are clamped to the grid.
    """
    u = np.clip(u, 0.0, W - 1.0)
    v = np.clip(v, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    fx, fy = u - x0, v - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    wts = [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
    return idx, wts


def bilinear_sample(feat: Tensor, batch, u, v, valid=None) -> Tensor:
    """Sample NCHW features at per-row (batch, u, v); returns (M, C).

    Rows with ``valid`` False get a zero vector.
    """
    B, C, H, W = feat.shape
    batch = np.asarray(batch)
    idx, wts = bilinear_weights(np.asarray(u, np.float64), np.asarray(v, np.float64), H, W)
    if valid is not None:
        wts = [w * valid for w in wts]
    wts = [w.astype(feat.dtype)[:, None] for w in wts]
    fl = feat.data.transpose(0, 2, 3, 1)  # B, H, W, C
    out = sum(w * fl[batch, yy, xx] for (yy, xx), w in zip(idx, wts))

    def back(g):
        if not feat.requires_grad:
            return
        acc = np.zeros((B, H, W, C), dtype=feat.dtype)
        for (yy, xx), w in zip(idx, wts):
            np.add.at(acc, (batch, yy, xx), w * g)
        _acc(feat, acc.transpose(0, 3, 1, 2))
    return Tensor(out, (feat,), back)


# ---------------------------------------------------------------------------
# graph traversal


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None, check_finite=True) -> None:
    """Populate ``.grad`` on every parameter reachable from ``loss``.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss._done:
        raise GraphError("backward() called twice; run a new forward pass first")
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order = _topo(loss)
    for node in order:
        if node._back is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._back is not None and node.grad is not None:
            node._back(node.grad)
    for node in order:
        if node._back is not None:
            node._back = None
            node.parents = ()
            node.grad = None
    loss._done = True
    if check_finite and params is not None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name}", param=name)
