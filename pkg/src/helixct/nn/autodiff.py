"""Minimal reverse-mode automatic differentiation over numpy arrays.

Float64 throughout: small desk-scale networks gain little from single
precision and the gradient checks need the headroom.  The graph is built by
the functional ops below; ``Tensor.backward()`` runs the tape in reverse
topological order.  Wrap inference in ``no_grad()`` to skip taping.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["Tensor", "no_grad", "constant", "add", "mul", "neg", "scale",
           "add_const", "relu", "sigmoid", "conv2d", "reflect_pad2d",
           "upsample2x", "crop2d", "concat", "l1_loss"]

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    return Tensor(data, requires_grad=False)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accum(a, -g)
    return _make(-a.data, (a,), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        _accum(a, g * s)
    return _make(a.data * s, (a,), backward)


def add_const(a, c):
    c = float(c)

    def backward(g):
        _accum(a, g)
    return _make(a.data + c, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * s * (1.0 - s))
    return _make(s, (a,), backward)


def _dilate(g, stride):
    if stride == 1:
        return g
    n, c, h, w = g.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation with zero padding; NCHW input, OIHW kernel."""
    kh, kw = w.data.shape[2], w.data.shape[3]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, dw)
        if x.requires_grad:
            gd = _dilate(g, stride)
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = w.data[:, :, ::-1, ::-1]
            win2 = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            dxc = np.tensordot(win2, wf, axes=([1, 4, 5], [0, 2, 3]))
            dxc = dxc.transpose(0, 3, 1, 2)
            dxp = np.zeros_like(xp)
            dxp[:, :, :dxc.shape[2], :dxc.shape[3]] = dxc
            dx = dxp[:, :, p:p + x.data.shape[2], p:p + x.data.shape[3]] if p else dxp
            _accum(x, dx)
    return _make(out, parents, backward)


def reflect_pad2d(x, pads):
    """Reflect-pad the two trailing axes; pads = (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    if max(pads) == 0:
        return x
    h, w = x.data.shape[2], x.data.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="reflect")
    rows = np.pad(np.arange(h), (pt, pb), mode="reflect")
    cols = np.pad(np.arange(w), (pl, pr), mode="reflect")

    def backward(g):
        buf = np.zeros(x.data.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
        np.add.at(buf.transpose(2, 0, 1, 3), rows, g.transpose(2, 0, 1, 3))
        dx = np.zeros_like(x.data)
        np.add.at(dx.transpose(3, 0, 1, 2), cols, buf.transpose(3, 0, 1, 2))
        _accum(x, dx)
    return _make(out, (x,), backward)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of the two trailing axes."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = g.shape
        _accum(x, g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))
    return _make(out, (x,), backward)


def crop2d(x, height, width):
    """Keep the leading height x width window of the trailing axes."""
    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., :height, :width] = g
        _accum(x, dx)
    return _make(x.data[..., :height, :width], (x,), backward)


def concat(tensors, axis=1):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def l1_loss(pred, target):
    """Mean absolute error against a constant target array."""
    target = np.asarray(target, dtype=np.float64)
    diff = pred.data - target

    def backward(g):
        _accum(pred, g * np.sign(diff) / diff.size)
    return _make(np.mean(np.abs(diff)), (pred,), backward)
