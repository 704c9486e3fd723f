"""Dense tensor with reverse-mode automatic differentiation.

Only the operations the change-detection model needs are provided. Every op
records a node carrying a global sequence number; ``backward`` replays the
adjoints of all nodes reachable from the loss in strictly decreasing sequence
order, i.e. the exact reverse of execution.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from . import _kernels

_SEQ = itertools.count()
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the autodiff tape (non-scalar loss, double backward)."""


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Rng:
    """Seeded generator built on the counter-based Philox bit generator.

    Identical seeds give identical streams independent of platform. ``child``
    derives an independent stream from ``(seed, key)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, key: int) -> "Rng":
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, int(key)])))
        return r

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape, scale=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)


class _Node:
    __slots__ = ("seq", "parents", "backward", "grad", "consumed")

    def __init__(self, parents, backward):
        self.seq = next(_SEQ)
        self.parents = parents
        self.backward = backward
        self.grad = None
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(a, b):
    """Wrap python scalars/arrays so they take the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    """
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req:
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Nodes reachable from an output, in execution order."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf tensor."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return Tape([])
    tape = Tape.from_output(loss)
    if any(n.consumed for n in tape.nodes):
        raise TapeError("backward called twice on the same graph; run a new forward first")
    loss._node.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        pgrads = node.backward(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None:
                pn = parent._node
                pn.grad = pg if pn.grad is None else pn.grad + pg
            else:
                parent.grad = pg.astype(parent.dtype, copy=False) if parent.grad is None else parent.grad + pg
    for node in tape.nodes:
        node.consumed = True
        node.grad = None
        node.backward = None
    return tape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_op(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # np.sign(0) == 0 gives the zero subgradient at the kink
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    e = float(exponent)
    out = x ** e

    def bw(g):
        if e == 0.0:
            return (np.zeros_like(g),)
        return (g * e * x ** (e - 1.0),)

    return make_op(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_op(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for {a.ndim}-d tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"log_softmax axis {axis} invalid for {a.ndim}-d tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    src, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        full[idx] = g
        return (full,)

    return make_op(a.data[idx], (a,), bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return make_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: off-axis shape mismatch {t.shape} vs {ref} (axis {axis})")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis of x; W has shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    y = matmul(x, transpose(w, (1, 0)))
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _check_conv(x, kh, kw, stride, pad, opname):
    if stride < 1 or pad < 0:
        raise DimensionError(f"{opname}: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if x.ndim != 4:
        raise DimensionError(f"{opname}: expected NCHW input, got shape {x.shape}")
    h, w = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if kh > h or kw > w:
        raise DimensionError(f"{opname}: kernel {kh}x{kw} does not fit padded input {h}x{w}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    cout, cin, kh, kw = w.shape
    _check_conv(x, kh, kw, stride, pad, "conv2d")
    n, c, h, wd = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {cin}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    w2 = w.data.reshape(cout, -1)
    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if pointwise:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    hp, wp = h + 2 * pad, wd + 2 * pad

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2))
            else:
                gxp = _kernels.col2im(np.ascontiguousarray(gcols), n, c, hp, wp, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    c, one, kh, kw = w.shape
    _check_conv(x, kh, kw, stride, pad, "depthwise_conv2d")
    n, cx, h, wd = x.shape
    if one != 1 or cx != c:
        raise DimensionError(f"depthwise_conv2d: input has {cx} channels, weight shape {w.shape}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    wd_ = np.ascontiguousarray(w.data)
    out = _kernels.dwconv_fwd(xp, wd_, stride, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gxp, gw = _kernels.dwconv_bwd(xp, wd_, np.ascontiguousarray(g), stride)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, bw)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class BNState:
    """Running statistics of a batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, initialized: bool = True,
                 dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        if initialized:
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)
        else:
            self.running_mean = None
            self.running_var = None


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    c = xd.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv_std.reshape(1, c, 1, 1)
        if state.running_mean is None:
            state.running_mean = np.zeros(c, dtype=xd.dtype)
            state.running_var = np.ones(c, dtype=xd.dtype)
        mom = state.momentum
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    else:
        if state.running_mean is None:
            raise RuntimeError("batchnorm2d: eval mode needs running statistics; run train mode first")
        inv_std = 1.0 / np.sqrt(state.running_var.astype(xd.dtype) + state.eps)
        xhat = (xd - state.running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = (xhat * gd + beta.data.reshape(1, c, 1, 1)).astype(xd.dtype, copy=False)
    inv4 = inv_std.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            mm = g.shape[0] * g.shape[2] * g.shape[3]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv4 / mm * (mm * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv4
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return make_op(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# resampling and dropout
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Bilinear weights, half-pixel centers, edge clamped: (n_in*factor, n_in)."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (1, 2, 4, 8):
        raise DimensionError(f"upsample_bilinear: unsupported factor {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    uh = _interp_matrix(h, factor, x.dtype)
    uw = _interp_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return make_op(out, (x,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an Rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
