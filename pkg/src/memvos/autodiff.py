"""Minimal reverse-mode autodiff over numpy arrays.

Just enough tape for this model family: convolutions, attention, layer norm,
resampling, and the loss heads. Graph construction is skipped entirely when no
input requires a gradient, so inference pays only the numpy cost.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.generic):  # numpy scalar: keep its dtype
            data = np.asarray(data)
        elif not isinstance(data, np.ndarray):
            # python floats/lists default to float32 so scalars never upcast
            # a float32 graph
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # graph execution ------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._bwd(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            if node._parents:  # free intermediate grads eagerly
                node.grad = None

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, bwd) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, bwd)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _node(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bwd)


def leaky_relu(a, alpha: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * a.data)

    def bwd(g):
        return (np.where(pos, g, alpha * g),)

    return _node(out, (a,), bwd)


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * inside,)

    return _node(out, (a,), bwd)


# reductions / shape --------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _node(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(da, a.data.shape), _unbroadcast(db, b.data.shape)

    return _node(out, (a, b), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), bwd)


def layernorm(a, gamma, beta, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize over one axis; gamma/beta shaped like that axis."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    axis = axis % a.data.ndim
    bshape = [1] * a.data.ndim
    bshape[axis] = a.data.shape[axis]
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gb + bb
    n = a.data.shape[axis]

    def bwd(g):
        red = tuple(i for i in range(g.ndim) if i != axis)
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gb
        dx = (inv / n) * (n * dxhat
                          - dxhat.sum(axis=axis, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True))
        return dx, dgamma, dbeta

    return _node(out, (a, gamma, beta), bwd)


# image ops ------------------------------------------------------------------

def _fold_edge_pad(g: np.ndarray, p: int) -> np.ndarray:
    # Fold gradient of edge-replicated padding back onto the border pixels.
    g = g.copy()
    g[..., p, :] += g[..., :p, :].sum(axis=-2)
    g[..., -p - 1, :] += g[..., -p:, :].sum(axis=-2)
    g = g[..., p:-p, :]
    g[..., :, p] += g[..., :, :p].sum(axis=-1)
    g[..., :, -p - 1] += g[..., :, -p:].sum(axis=-1)
    return g[..., :, p:-p]


def _conv1x1(x: Tensor, w: Tensor, bt: Tensor | None) -> Tensor:
    # pointwise convolution as a single gemm, skipping im2col
    b, ci, h, wd = x.data.shape
    co = w.data.shape[0]
    wmat = w.data.reshape(co, ci)
    xm = x.data.reshape(b, ci, h * wd)
    out = np.matmul(wmat, xm).reshape(b, co, h, wd)
    if bt is not None:
        out = out + bt.data.reshape(1, -1, 1, 1)

    def bwd(g):
        gm = g.reshape(b, co, h * wd)
        dx = np.matmul(wmat.T, gm).reshape(x.data.shape)
        dw = np.einsum("bop,bip->oi", gm, xm).reshape(w.data.shape)
        if bt is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if bt is None else (x, w, bt)
    return _node(out, parents, bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None,
           pad_mode: str = "zero") -> Tensor:
    """2-D convolution over (B, Cin, H, W) with kernel (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    kh, kw = w.data.shape[2], w.data.shape[3]
    p = kh // 2 if padding is None else padding
    if kh == 1 and kw == 1 and stride == 1 and p == 0:
        return _conv1x1(x, w, bt)
    if p > 0:
        mode = "constant" if pad_mode == "zero" else "edge"
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)
    else:
        xp = x.data
    out = kernels.conv2d_forward(xp, w.data, stride)
    if bt is not None:
        out = out + bt.data.reshape(1, -1, 1, 1)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        dxp = kernels.conv2d_backward_input(g, w.data, stride, hp, wp)
        if p > 0:
            if pad_mode == "zero":
                dx = dxp[:, :, p:-p, p:-p]
            else:
                dx = _fold_edge_pad(dxp, p)
        else:
            dx = dxp
        dw = kernels.conv2d_backward_weight(xp, g, stride, kh, kw)
        if bt is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if bt is None else (x, w, bt)
    return _node(out, parents, bwd)


def avgpool2d(x, k: int) -> Tensor:
    """Average pool with stride = kernel = k; ragged edges are zero-padded."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    ph, pw = (-h) % k, (-w) % k
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw))) if ph or pw else x.data
    ho, wo = xp.shape[2] // k, xp.shape[3] // k
    out = xp.reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / float(k * k)
        return (gx[:, :, :h, :w],)

    return _node(out, (x,), bwd)


def _resize_coeffs(n_in: int, n_out: int):
    # align_corners=False sampling grid, clamped to the border
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = (src - i0)
    return i0, i1, t


def bilinear_resize(x, out_hw) -> Tensor:
    """Bilinear resize of the trailing two axes."""
    x = as_tensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    ho, wo = out_hw
    if (h, w) == (ho, wo):
        return _node(x.data, (x,), lambda g: (g,))
    y0, y1, ty = _resize_coeffs(h, ho)
    x0, x1, tx = _resize_coeffs(w, wo)
    ty2 = ty.reshape(-1, 1)
    tx2 = tx.reshape(1, -1)
    corners = ((y0, x0, (1 - ty2) * (1 - tx2)), (y0, x1, (1 - ty2) * tx2),
               (y1, x0, ty2 * (1 - tx2)), (y1, x1, ty2 * tx2))
    d = x.data
    lead = d.shape[:-2]
    df = d.reshape(-1, h * w)
    out = None
    for yi, xi, wgt in corners:
        flat = (yi[:, None] * w + xi[None, :]).reshape(-1)
        term = df[:, flat] * wgt.reshape(-1)[None, :]
        out = term if out is None else out + term
    out = out.reshape(*lead, ho, wo).astype(d.dtype, copy=False)

    def bwd(g):
        gf = g.reshape(-1, ho * wo)
        dx = np.zeros((gf.shape[0], h * w), dtype=g.dtype)
        rows = np.arange(gf.shape[0])[:, None]
        for yi, xi, wgt in corners:
            flat = (yi[:, None] * w + xi[None, :]).reshape(-1)
            np.add.at(dx, (rows, flat[None, :]), gf * wgt.reshape(-1)[None, :])
        return (dx.reshape(*lead, h, w),)

    return _node(out, (x,), bwd)


def topk_mean(x, k: int) -> Tensor:
    """Mean of the k largest entries (flattened)."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    k = max(1, min(k, flat.size))
    idx = np.argpartition(-flat, k - 1)[:k]
    out = flat[idx].mean()

    def bwd(g):
        dx = np.zeros_like(flat)
        dx[idx] = g / k
        return (dx.reshape(x.data.shape),)

    return _node(np.asarray(out), (x,), bwd)
