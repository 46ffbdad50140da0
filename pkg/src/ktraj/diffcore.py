"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the operators needed by the reconstruction network and the image losses
are provided.  Broadcasting is limited to combining a tensor with a scalar
(either a Python number or a shape-``()`` tensor).

Example::

    tape = Tape()
    x = tape.leaf(np.arange(4.0))
    loss = (x * x).sum()
    grads = tape.backward(loss)   # {x.node_id: 2 * x.values}
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tape", "TapeTensor",
    "add", "sub", "mul", "div", "neg", "mul_scalar", "sqrt", "abs_", "relu", "leaky_relu",
    "sum_", "mean", "reshape", "concat", "conv2d", "instance_norm", "max_pool2d",
    "nearest_upsample", "linear", "uniform_filter", "percentile",
]

INSTANCE_NORM_EPS = 1e-5


class TapeTensor:
    __slots__ = ("tape", "values", "node_id", "requires_grad", "grad", "__weakref__")

    def __init__(self, tape, values, node_id, requires_grad):
        self.tape = tape
        self.values = values
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"TapeTensor(id={self.node_id}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Tape:
    """Records operations in creation order; ``backward`` replays them in reverse."""

    def __init__(self):
        self._parents = []
        self._backward = []
        self._req = []
        self._leaves = []
        self._done = False

    def __len__(self):
        return len(self._parents)

    def leaf(self, values, requires_grad=True):
        t = self._record(np.asarray(values, dtype=np.float64), (), None, requires_grad)
        self._leaves.append(t)
        return t

    def constant(self, values):
        return self.leaf(values, requires_grad=False)

    def _record(self, values, parents, backward, requires_grad):
        node_id = len(self._parents)
        self._parents.append(tuple(p.node_id for p in parents))
        self._backward.append(backward if requires_grad else None)
        self._req.append(bool(requires_grad))
        return TapeTensor(self, values, node_id, requires_grad)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) for every leaf with ``requires_grad``.

        Returns a map ``node_id -> gradient`` and sets ``leaf.grad``.
        """
        if self._done:
            raise RuntimeError("backward has already been run on this tape")
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._done = True
        grads = {loss.node_id: np.ones_like(loss.values)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            fn = self._backward[nid]
            if g is None or fn is None:
                continue
            for pid, pg in zip(self._parents[nid], fn(g)):
                if pg is None or not self._req[pid]:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for leaf in self._leaves:
            if leaf.requires_grad:
                leaf.grad = grads.get(leaf.node_id, np.zeros_like(leaf.values))
                out[leaf.node_id] = leaf.grad
        return out


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, TapeTensor):
            return x.tape
    raise TypeError("at least one operand must be a TapeTensor")


def _needs(*xs):
    return any(isinstance(x, TapeTensor) and x.requires_grad for x in xs)


def _val(x):
    return x.values if isinstance(x, TapeTensor) else np.asarray(x, dtype=np.float64)


def _make(values, parents, backward):
    tape = _tape_of(*parents)
    tensors = tuple(p for p in parents if isinstance(p, TapeTensor))
    req = _needs(*tensors)
    if not req:
        return tape._record(values, tensors, None, False)

    def bw(g):
        grads = backward(g)
        return tuple(gr for p, gr in zip(parents, grads) if isinstance(p, TapeTensor))

    return tape._record(values, tensors, bw, True)


def _binary_shapes(op, a, b):
    sa, sb = np.shape(_val(a)), np.shape(_val(b))
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    _binary_shapes("add", a, b)
    va, vb = _val(a), _val(b)
    return _make(va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    _binary_shapes("sub", a, b)
    va, vb = _val(a), _val(b)
    return _make(va - vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a, b):
    _binary_shapes("mul", a, b)
    va, vb = _val(a), _val(b)
    return _make(va * vb, (a, b),
                 lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def div(a, b):
    _binary_shapes("div", a, b)
    va, vb = _val(a), _val(b)
    out = va / vb
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)))


def neg(x):
    return _make(-x.values, (x,), lambda g: (-g,))


def mul_scalar(x, c):
    c = float(c)
    return _make(x.values * c, (x,), lambda g: (g * c,))


def sqrt(x):
    out = np.sqrt(x.values)
    return _make(out, (x,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1.0)), 0.0),))


def abs_(x):
    """|x| with subgradient 0 at 0."""
    return _make(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def relu(x):
    """max(x, 0) with subgradient 0 at 0."""
    v = x.values
    return _make(np.maximum(v, 0.0), (x,), lambda g: (g * (v > 0),))


def leaky_relu(x, slope=0.01):
    v = x.values
    return _make(np.where(v > 0, v, slope * v), (x,), lambda g: (np.where(v > 0, g, slope * g),))


def sum_(x, axis=None):
    v = x.values
    out = np.asarray(v.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x):
    n = x.values.size
    return _make(np.asarray(x.values.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x, shape):
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def _getitem(x, index):
    v = x.values

    def bw(g):
        out = np.zeros_like(v)
        out[index] = g
        return (out,)

    return _make(v[index], (x,), bw)


def concat(tensors, axis=0):
    vals = [t.values for t in tensors]
    ref = list(vals[0].shape)
    for v in vals[1:]:
        s = list(v.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {vals[0].shape} and {v.shape} on axis {axis}")
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(np.concatenate(vals, axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation).

    x: (Cin, H, W); w: (Cout, Cin, k, k) with odd k; b: (Cout,) or None.
    """
    xv, wv = x.values, w.values
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[1] != xv.shape[0] or wv.shape[2] != wv.shape[3]:
        raise ShapeError(f"conv2d: input {xv.shape} incompatible with kernel {wv.shape}")
    k = wv.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {k} must be odd")
    p = k // 2
    if b is not None and b.shape != (wv.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({wv.shape[0]},)")
    if k == 1:
        out = np.tensordot(wv[:, :, 0, 0], xv, axes=(1, 0))
        win = None
    else:
        win = sliding_window_view(np.pad(xv, ((0, 0), (p, p), (p, p))), (k, k), axis=(1, 2))
        out = np.tensordot(wv, win, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b.values[:, None, None]

    def bw(g):
        if k == 1:
            gw = np.tensordot(g, xv, axes=([1, 2], [1, 2]))[:, :, None, None]
            gx = np.tensordot(wv[:, :, 0, 0], g, axes=(0, 0))
        else:
            gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            gwin = sliding_window_view(np.pad(g, ((0, 0), (p, p), (p, p))), (k, k), axis=(1, 2))
            gx = np.tensordot(wv[:, :, ::-1, ::-1], gwin, axes=([0, 2, 3], [0, 3, 4]))
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    if b is None:
        return _make(out, parents, lambda g: bw(g)[:2])
    return _make(out, parents, bw)


def instance_norm(x, eps=INSTANCE_NORM_EPS):
    """Per-channel normalization over the spatial axes of a (C, H, W) tensor."""
    v = x.values
    if v.ndim != 3:
        raise ShapeError(f"instance_norm: expected (C, H, W), got {v.shape}")
    mu = v.mean(axis=(1, 2), keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(1, 2), keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gxm = (g * xhat).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw)


def max_pool2d(x):
    """2x2 max pooling, stride 2; ties resolve to the lowest flat index of the window."""
    v = x.values
    C, H, W = v.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: spatial dims {H}x{W} must be even")
    blocks = v.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W),)

    return _make(out, (x,), bw)


def nearest_upsample(x):
    v = x.values
    C, H, W = v.shape
    out = np.repeat(np.repeat(v, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),))


def linear(x, w, b=None):
    """x @ w.T + b for x of shape (..., n_in) and w of shape (n_out, n_in)."""
    xv, wv = x.values, w.values
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear: input features {xv.shape[-1]} != weight columns {wv.shape[1]}")
    out = xv @ wv.T
    if b is not None:
        out = out + b.values

    def bw(g):
        g2 = g.reshape(-1, wv.shape[0])
        x2 = xv.reshape(-1, wv.shape[1])
        gx = (g2 @ wv).reshape(xv.shape)
        gw = g2.T @ x2
        return (gx, gw, g2.sum(axis=0)) if b is not None else (gx, gw)

    return _make(out, (x, w) if b is None else (x, w, b), bw)


def uniform_filter(x, size=7):
    """Mean over every ``size x size`` window of a 2-D tensor ('valid' windows only)."""
    v = x.values
    if v.ndim != 2 or v.shape[0] < size or v.shape[1] < size:
        raise ShapeError(f"uniform_filter: window {size} larger than image {v.shape}")
    out = sliding_window_view(v, (size, size)).mean(axis=(2, 3))

    def bw(g):
        gp = np.pad(g, size - 1) / (size * size)
        return (sliding_window_view(gp, (size, size)).sum(axis=(2, 3)),)

    return _make(out, (x,), bw)


def percentile(x, q):
    """Linear-interpolation percentile of all entries, as a scalar tensor."""
    flat = x.values.ravel()
    order = np.argsort(flat, kind="stable")
    pos = q / 100.0 * (flat.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    frac = pos - lo
    vlo, vhi = flat[order[lo]], flat[order[hi]]
    out = np.asarray(vlo + frac * (vhi - vlo))

    def bw(g):
        gf = np.zeros_like(flat)
        gf[order[lo]] += (1 - frac) * g
        gf[order[hi]] += frac * g
        return (gf.reshape(x.shape),)

    return _make(out, (x,), bw)
