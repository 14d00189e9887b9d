"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Scope is deliberately narrow: exactly the operations the depth-consistency
network and its losses need (conv, transposed conv, instance norm, ELU,
tanh, concat, crop, constant-coefficient bilinear gathers, and reductions).
Graphs are built eagerly; Tensor.backward() walks the tape in reverse
topological order. Gradients accumulate into .grad buffers of tensors
created with requires_grad=True.

Everything is differentiated w.r.t. tensor VALUES only; warp coordinates,
masks, and normalization scales enter as constants.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ValidationError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (used by evaluation and
    finite-difference loops, where tape bookkeeping is pure overhead)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.ndim != 0:
                raise ValidationError("backward() without an explicit gradient needs a scalar")
            grad = np.array(1.0)
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g if a.data.shape == g.shape else np.sum(g))
        if b.requires_grad:
            b._accumulate(g if b.data.shape == g.shape else np.sum(g))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(_wrap(b), -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a constant array or scalar."""
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(ga if ga.shape == a.data.shape else np.sum(ga))
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb if gb.shape == b.data.shape else np.sum(gb))

    return _node(out_data, (a, b), backward)


def scale(a, k: float) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g * k)

    return _node(a.data * k, (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def crop(a, top: int, left: int, height: int, width: int) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 4:
        raise DimensionError("crop expects NCHW")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, :, top : top + height, left : left + width] = g
        a._accumulate(full)

    return _node(a.data[:, :, top : top + height, left : left + width].copy(), (a,), backward)


def elu(a) -> Tensor:
    a = _wrap(a)
    neg = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(a.data > 0, a.data, neg)

    def backward(g):
        a._accumulate(g * np.where(a.data > 0, 1.0, neg + 1.0))

    return _node(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data**2))

    return _node(out_data, (a,), backward)


def absolute(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward)


def square(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g * 2.0 * a.data)

    return _node(a.data**2, (a,), backward)


def sum_all(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, float(g)))

    return _node(np.sum(a.data), (a,), backward)


def _conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with (out, in, kh, kw) kernels,
    zero padding. b=None means no bias."""
    x, w = _wrap(x), _wrap(w)
    b = _wrap(b) if b is not None else None
    n, c, h, wd = x.data.shape
    co, ci, kh, kw = w.data.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel expects {ci}")
    ho, wo = _conv_out_size(h, kh, stride, pad), _conv_out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    if b is not None:
        out_data = out_data + b.data[:, None, None]

    def backward(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accumulate(np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True
                    )
            x._accumulate(gxp[:, :, pad : pad + h, pad : pad + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d), kernels (in, out, kh, kw).
    Output spatial size is (n-1)*stride - 2*pad + k. b=None means no bias."""
    x, w = _wrap(x), _wrap(w)
    b = _wrap(b) if b is not None else None
    n, c, h, wd = x.data.shape
    ci, co, kh, kw = w.data.shape
    if ci != c:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {c}, kernel expects {ci}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d output size would be empty")
    full = np.zeros((n, co, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += np.einsum(
                "nchw,co->nohw", x.data, w.data[:, :, i, j], optimize=True
            )
    out_data = full[:, :, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out_data = out_data + b.data[:, None, None]

    def backward(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        gfull = np.zeros(full.shape)
        gfull[:, :, pad : pad + ho, pad : pad + wo] = g
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gslice = gfull[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
                    gw[:, :, i, j] = np.einsum("nchw,nohw->co", x.data, gslice, optimize=True)
            w._accumulate(gw)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gslice = gfull[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
                    gx += np.einsum("nohw,co->nchw", gslice, w.data[:, :, i, j], optimize=True)
            x._accumulate(gx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def instance_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize per (sample, channel) over spatial dims, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects NCHW")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xh = (x.data - mu) * inv_std
    out_data = gain.data[:, None, None] * xh + bias.data[:, None, None]
    m = x.data.shape[2] * x.data.shape[3]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if gain.requires_grad:
            gain._accumulate((g * xh).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = g * gain.data[:, None, None]
            term1 = m * dxh
            term2 = dxh.sum(axis=(2, 3), keepdims=True)
            term3 = xh * (dxh * xh).sum(axis=(2, 3), keepdims=True)
            x._accumulate(inv_std / m * (term1 - term2 - term3))

    return _node(out_data, (x, gain, bias), backward)


def warp_gather(x, idx, wts) -> Tensor:
    """Constant-coefficient bilinear gather.

    x: (N, C, H, W); idx: (N, 4, P) flattened-spatial tap indices;
    wts: (N, 4, P) tap weights with P = H*W. Taps with weight 0 are inert,
    so out-of-frame samples contribute nothing. Gradients flow to x only;
    idx/wts are fixed coefficients (flow is not differentiated through).
    """
    x = _wrap(x)
    n, c, h, w = x.data.shape
    p = h * w
    idx = np.asarray(idx, dtype=np.int64)
    wts = np.asarray(wts, dtype=np.float64)
    if idx.shape != (n, 4, p) or wts.shape != (n, 4, p):
        raise DimensionError(f"warp taps must be (N, 4, H*W), got {idx.shape} / {wts.shape}")
    flat = x.data.reshape(n, c, p)
    out = np.zeros((n, c, p))
    for t in range(4):
        out += wts[:, None, t, :] * np.take_along_axis(flat, idx[:, None, t, :].repeat(c, axis=1), axis=2)
    out_data = out.reshape(n, c, h, w)

    def backward(g):
        gf = g.reshape(n, c, p)
        gx = np.zeros((n, c, p))
        for s in range(n):
            for t in range(4):
                np.add.at(gx[s], (slice(None), idx[s, t]), wts[s, t] * gf[s])
        x._accumulate(gx.reshape(n, c, h, w))

    return _node(out_data, (x,), backward)
