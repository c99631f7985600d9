"""Dense float64 tensors with reverse-mode differentiation.

The engine covers exactly the operations the autoencoder stack needs:
elementwise arithmetic with numpy-style broadcasting, matrix products,
strided 2-d convolution and its transpose, layer normalisation, softmax,
pointwise activations, reductions, and the reconstruction losses. Values
are float64 throughout. The backward pass visits nodes in exact reverse
insertion order, so two runs from the same seed produce bit-identical
values and gradients.

Gradients accumulate into ``.grad`` on leaf tensors; calling ``backward``
twice without zeroing in between adds the two passes together (documented
contract; the training loop zeroes explicitly between passes).
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonFiniteError(RuntimeError):
    """Raised when a NaN or Inf surfaces where only finite values are allowed."""


_node_ids = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus an optional slot in a backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_nid")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if _backward_fn is None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._nid = next(_node_ids)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    """Wrap scalars / ndarrays as constant tensors; pass Tensor through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, requires_grad=False, op=op, _parents=(), _backward_fn=False)
    return Tensor(data, requires_grad=True, op=op, _parents=tuple(parents), _backward_fn=backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _reachable(root: Tensor):
    seen = {id(root)}
    out = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
                stack.append(p)
    return out


def backward(loss: Tensor):
    """Populate gradients of everything ``loss`` depends on.

    ``loss`` must be a scalar. Intermediate gradients are rebuilt from
    scratch on every call; leaf gradients accumulate across calls.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() on a tensor that does not require grad")
    nodes = _reachable(loss)
    for n in nodes:
        if n._parents:
            n.grad = None
    loss.grad = np.ones_like(loss.data)
    nodes.sort(key=lambda n: n._nid, reverse=True)
    for n in nodes:
        if n._backward_fn is not None and n._backward_fn is not False and n.grad is not None:
            n._backward_fn(n.grad)


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest-inserted node under ``root`` holding a NaN/Inf, if any."""
    nodes = sorted(_reachable(root), key=lambda n: n._nid)
    for n in nodes:
        if not np.all(np.isfinite(n.data)):
            return n
    return None


# -- elementwise arithmetic -----------------------------------------------


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. 2-d operands or stacked operands with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims must match, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, got {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(out_data, (a, b), bw, "matmul")


# -- convolution -----------------------------------------------------------


def _conv_extent(extent, k, stride, pad, what):
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d: non-integral output {what}: (({extent} + 2*{pad} - {k}) / {stride}) + 1"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _conv_forward(x, w, stride, pad):
    b, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    oh = _conv_extent(h, kh, stride, pad, "height")
    ow = _conv_extent(ww, kw, stride, pad, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(b, o, oh, ow)


def _conv_grad_w(x, g, stride, pad, kh, kw):
    b = x.shape[0]
    o = g.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    m = oh * ow
    gw = np.matmul(g.reshape(b, o, m), cols.swapaxes(1, 2)).sum(axis=0)
    return gw.reshape(o, x.shape[1], kh, kw)


def _conv_grad_x(g, w, stride, pad, h, ww):
    b = g.shape[0]
    o, c, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    gcols = np.matmul(w.reshape(o, -1).T, g.reshape(b, o, oh * ow))
    gcols = gcols.reshape(b, c, kh, kw, oh, ow)
    gxp = np.zeros((b, c, h + 2 * pad, ww + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
    return gxp[:, :, pad : pad + h, pad : pad + ww]


def conv2d(x, w, stride=1, pad=0) -> Tensor:
    """Strided 2-d cross-correlation of (B,C,H,W) with kernels (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    out_data = _conv_forward(x.data, w.data, stride, pad)
    kh, kw = w.shape[2], w.shape[3]
    h, ww = x.shape[2], x.shape[3]

    def bw(g):
        _accumulate(x, _conv_grad_x(g, w.data, stride, pad, h, ww))
        _accumulate(w, _conv_grad_w(x.data, g, stride, pad, kh, kw))

    return _make(out_data, (x, w), bw, "conv2d")


def conv_transpose2d(x, w, stride=1, pad=0) -> Tensor:
    """Adjoint of conv2d with the same kernel, stride and padding.

    Maps (B,O,h,w) back to (B,C,H,W) where conv2d(·, w, stride, pad) maps
    (B,C,H,W) to (B,O,h,w); kernels keep the conv2d layout (O,C,kh,kw).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    o, c, kh, kw = w.shape
    h_out = (x.shape[2] - 1) * stride - 2 * pad + kh
    w_out = (x.shape[3] - 1) * stride - 2 * pad + kw
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv_transpose2d: output extent {h_out}x{w_out} not positive")
    out_data = _conv_grad_x(x.data, w.data, stride, pad, h_out, w_out)

    def bw(g):
        _accumulate(x, _conv_forward(g, w.data, stride, pad))
        _accumulate(w, _conv_grad_w(g, x.data, stride, pad, kh, kw))

    return _make(out_data, (x, w), bw, "conv_transpose2d")


# -- normalisation and attention pieces -------------------------------------


def layernorm(x, gain, bias, eps=1e-5) -> Tensor:
    """Zero-mean unit-variance over the last dim, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: last dim {d} but gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        gx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        _accumulate(x, gx)

    return _make(out_data, (x, gain, bias), bw, "layernorm")


def softmax(x) -> Tensor:
    """Max-subtracted softmax over the last dim."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), bw, "softmax")


# -- pointwise activations ---------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), bw, "relu")


def leaky_relu(x, negative_slope=0.2) -> Tensor:
    x = as_tensor(x)
    out_data = np.where(x.data > 0.0, x.data, negative_slope * x.data)

    def bw(g):
        _accumulate(x, g * np.where(x.data > 0.0, 1.0, negative_slope))

    return _make(out_data, (x,), bw, "leaky_relu")


def gelu(x) -> Tensor:
    """Exact erf-based gelu."""
    x = as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * (phi + x.data * pdf))

    return _make(out_data, (x,), bw, "gelu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)

    def bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), bw, "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.logaddexp(0.0, x.data)

    def bw(g):
        _accumulate(x, g * expit(x.data))

    return _make(out_data, (x,), bw, "softplus")


# -- reductions and losses ---------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted({a % ndim for a in axis}))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax) if ax else g
        _accumulate(x, np.broadcast_to(gk, x.data.shape))

    return _make(out_data, (x,), bw, "sum")


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    count = 1
    for a in ax:
        count *= x.data.shape[a]
    out_data = x.data.mean(axis=ax, keepdims=keepdims)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax) if ax else g
        _accumulate(x, np.broadcast_to(gk, x.data.shape) / count)

    return _make(out_data, (x,), bw, "mean")


def l1_loss(a, b) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (float(g) / n)
        _accumulate(a, s)
        _accumulate(b, -s)

    return _make(np.abs(diff).mean(), (a, b), bw, "l1_loss")


def mse_loss(a, b) -> Tensor:
    """Mean squared difference over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = diff * (2.0 * float(g) / n)
        _accumulate(a, s)
        _accumulate(b, -s)

    return _make((diff * diff).mean(), (a, b), bw, "mse_loss")


# -- structural ops ----------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.data.shape
    out_data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(orig))

    return _make(out_data, (x,), bw, "reshape")


def swapaxes(x, a, b) -> Tensor:
    x = as_tensor(x)
    out_data = np.swapaxes(x.data, a, b)

    def bw(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return _make(out_data, (x,), bw, "swapaxes")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bw, "concat")


def narrow(x, axis, start, length) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back into place."""
    x = as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accumulate(x, gx)

    return _make(out_data, (x,), bw, "narrow")


def gather_rows(x, indices) -> Tensor:
    """Select rows of a (K, d) tensor; gradient scatter-adds by index."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows: need a 2-d table, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {x.shape[0]} rows")
    out_data = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(out_data, (x,), bw, "gather_rows")


def straight_through(features, quantized) -> Tensor:
    """Forward the quantized values, route the whole gradient to ``features``.

    ``quantized`` contributes no graph edge here; train it through a
    separate distance term.
    """
    features, quantized = as_tensor(features), as_tensor(quantized)
    if features.shape != quantized.shape:
        raise ShapeError(f"straight_through: shapes differ, {features.shape} vs {quantized.shape}")

    def bw(g):
        _accumulate(features, g)

    return _make(quantized.data, (features,), bw, "straight_through")


def stop_gradient(x) -> Tensor:
    """Forward identity with zero gradient (detached constant)."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False, op="stop_gradient", _parents=(), _backward_fn=False)
