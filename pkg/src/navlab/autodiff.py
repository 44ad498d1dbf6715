"""Reverse-mode automatic differentiation over dense numpy tensors.

This is the single math substrate for the perception encoders, the recurrent
agent, PPO and the probing heads.  The design is a dynamic tape: every op
returns a new ``Tensor`` holding a closure that propagates gradients to its
parents.  ``Tensor.backward()`` runs a topological sweep from a scalar loss.

Training runs in float32; gradient checks run the same code in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip tape construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x, dtype=None) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64 if dtype is None else dtype)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return a


class Tensor:
    """A dense array plus an optional gradient-tracking node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # -- graph ----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class Parameter(Tensor):
    """Named trainable tensor.  Frozen parameters never receive gradients."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  parents=tuple(parents) if req else (),
                  backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic kernels
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward)


def texp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward)


def tlog(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(out_data, (a,), backward)


def tabs(a) -> Tensor:
    a = _wrap(a)
    out_data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(out_data, (a,), backward)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        x._accumulate(g * mask)

    return _node(out_data, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximation GELU."""
    x = _wrap(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
        x._accumulate(g * dx)

    return _node(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # Evaluate from the side that cannot overflow.
    pos = x.data >= 0
    ex = np.exp(np.where(pos, -x.data, x.data))
    out_data = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), backward)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out_data ** 2))

    return _node(out_data, (x,), backward)


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _node(out_data, (a, b), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        x._accumulate(g * mask)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(out_data, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    out_data = x.data.reshape(shape)
    in_shape = x.shape

    def backward(g):
        x._accumulate(g.reshape(in_shape))

    return _node(out_data, (x,), backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _wrap(x)
    out_data = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _node(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base):
            raise ShapeError(f"concat: rank mismatch {base} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out_data, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(gp)

    return _node(out_data, tuple(tensors), backward)


def index(x, idx) -> Tensor:
    """Basic slicing / integer-array indexing with scatter-add backward."""
    x = _wrap(x)
    out_data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """x snapped through a dense layer: x @ w + b over the last axis."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    out = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _node(out_data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (x,), backward)


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then scale/shift (gamma/beta broadcast)."""
    x = _wrap(x)
    gamma, beta = _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gshape = [1] * x.ndim
    gshape[axis] = x.shape[axis]
    gd = gamma.data.reshape(gshape)
    bd = beta.data.reshape(gshape)
    out_data = xhat * gd + bd
    n = x.shape[axis]

    def backward(g):
        if gamma.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
            gamma._accumulate((g * xhat).sum(axis=red).reshape(gamma.shape))
        if beta.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
            beta._accumulate(g.sum(axis=red).reshape(beta.shape))
        if x.requires_grad:
            gh = g * gd
            term1 = gh
            term2 = gh.mean(axis=axis, keepdims=True)
            term3 = xhat * (gh * xhat).mean(axis=axis, keepdims=True)
            x._accumulate(inv * (term1 - term2 - term3))

    return _node(out_data, (x, gamma, beta), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Lookup rows of ``table`` at integer ``ids``."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _node(out_data, (table,), backward)


def mean_pool(x, axis: int = 1) -> Tensor:
    """Mean over one axis (e.g. token axis of [N, T, C])."""
    return tmean(x, axis=axis)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of padded input as [N, Ho, Wo, C, kh, kw] windows (copied)."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(win)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), NCHW, kernel [O, C, kh, kw]."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x[N,C,H,W], w[O,C,kh,kw]; got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape} kernel {w.shape}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw).T
    out_mat = cols @ wmat
    out_data = out_mat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if b is not None:
        out_data = out_data + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if w.requires_grad:
            gw = cols.T @ gmat
            w._accumulate(gw.T.reshape(o, c, kh, kw))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            x._accumulate(gxp)

    return _node(out_data, parents, backward)


# ---------------------------------------------------------------------------
# space-to-depth rearrangement
# ---------------------------------------------------------------------------

def space_to_depth(x, block: int) -> Tensor:
    """Rearrange [..., C, H, W] into [..., C*block^2, H/block, W/block]."""
    x = _wrap(x)
    if x.ndim < 3:
        raise ShapeError(f"space_to_depth expects at least [C,H,W], got {x.shape}")
    *lead, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"space_to_depth: dims {h}x{w} not divisible by block {block}")
    hb, wb = h // block, w // block
    d = x.data.reshape(*lead, c, hb, block, wb, block)
    nd = d.ndim
    perm = tuple(range(len(lead))) + (nd - 5, nd - 3, nd - 1, nd - 4, nd - 2)
    out_data = d.transpose(perm).reshape(*lead, c * block * block, hb, wb)
    in_shape = x.shape

    def backward(g):
        gd = g.reshape(*lead, c, block, block, hb, wb)
        nd2 = gd.ndim
        inv = tuple(range(len(lead))) + (nd2 - 5, nd2 - 2, nd2 - 4, nd2 - 1, nd2 - 3)
        x._accumulate(gd.transpose(inv).reshape(in_shape))

    return _node(out_data, (x,), backward)


def depth_to_space(x, block: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    x = _wrap(x)
    if x.ndim < 3:
        raise ShapeError(f"depth_to_space expects at least [C,H,W], got {x.shape}")
    *lead, cb, hb, wb = x.shape
    if cb % (block * block):
        raise ShapeError(f"depth_to_space: channels {cb} not divisible by block^2")
    c = cb // (block * block)
    d = x.data.reshape(*lead, c, block, block, hb, wb)
    nd = d.ndim
    perm = tuple(range(len(lead))) + (nd - 5, nd - 2, nd - 4, nd - 1, nd - 3)
    out_data = d.transpose(perm).reshape(*lead, c, hb * block, wb * block)
    in_shape = x.shape

    def backward(g):
        gd = g.reshape(*lead, c, hb, block, wb, block)
        nd2 = gd.ndim
        inv = tuple(range(len(lead))) + (nd2 - 5, nd2 - 3, nd2 - 1, nd2 - 4, nd2 - 2)
        x._accumulate(gd.transpose(inv).reshape(in_shape))

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# attention and recurrence composites
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    n, t, c = x.shape
    if c % num_heads:
        raise ShapeError(f"attention: dim {c} not divisible by {num_heads} heads")
    return transpose(reshape(x, (n, t, num_heads, c // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (n, t, h * d))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         return_weights: bool = False):
    """Multi-head scaled dot-product attention on [N, T, C] tensors."""
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    scale = 1.0 / math.sqrt(q.shape[-1] // num_heads)
    logits = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), scale)
    weights = softmax(logits, axis=-1)
    out = _merge_heads(matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


def multi_head_attention(q, k, v, num_heads: int) -> Tensor:
    return scaled_dot_attention(q, k, v, num_heads)


def cross_attention(x, context, num_heads: int) -> Tensor:
    """Attention where ``x`` tokens query ``context`` tokens."""
    return scaled_dot_attention(x, context, context, num_heads)


def gru_cell(x, h, wx, wh, bx, bh) -> Tensor:
    """Single GRU step.  Gate layout along columns: reset | update | new."""
    x, h = _wrap(x), _wrap(h)
    hidden = h.shape[-1]
    if wx.shape[1] != 3 * hidden or wh.shape != (hidden, 3 * hidden):
        raise ShapeError(
            f"gru_cell: weights {wx.shape}/{wh.shape} do not match hidden {hidden}")
    gx = linear(x, wx, bx)
    gh = linear(h, wh, bh)
    r = sigmoid(gx[:, :hidden] + gh[:, :hidden])
    z = sigmoid(gx[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    n = tanh(gx[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return (1.0 - z) * n + z * h


# ---------------------------------------------------------------------------
# op registry (single dispatch surface; used by the gradcheck CLI)
# ---------------------------------------------------------------------------

OP_KINDS: dict[str, Callable] = {
    "linear": linear,
    "conv2d": conv2d,
    "relu": relu,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "multi_head_attention": multi_head_attention,
    "cross_attention": cross_attention,
    "gru_cell": gru_cell,
    "concat": concat,
    "reshape": reshape,
    "mean_pool": mean_pool,
    "embedding": embedding,
    "space_to_depth": space_to_depth,
    "depth_to_space": depth_to_space,
}


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch an op by name; shape validation happens inside the op."""
    if kind not in OP_KINDS:
        raise KeyError(f"unknown op kind {kind!r}; known: {sorted(OP_KINDS)}")
    attrs = attrs or {}
    if kind == "concat":
        return concat(inputs, **attrs)
    return OP_KINDS[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameter collection / backward entry point
# ---------------------------------------------------------------------------

def collect_parameters(loss: Tensor) -> list[Parameter]:
    """All Parameters reachable from ``loss`` through the tape."""
    found: dict[int, Parameter] = {}
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Parameter):
            found[id(node)] = node
        stack.extend(node._parents)
    return list(found.values())


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Backprop from a scalar loss; returns gradients keyed by parameter name.

    Frozen parameters are absent from the result.
    """
    params = collect_parameters(loss)
    for p in params:
        p.grad = None
    loss.backward()
    return {p.name: p.grad for p in params
            if not p.frozen and p.grad is not None}


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int,
              dtype=np.float32) -> np.ndarray:
    """Normal(0, sqrt(2 / fan_in)): keeps activation scale through relu
    stacks, where a small constant std would shrink the signal geometrically
    with depth."""
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def orthogonal(rng: np.random.Generator, shape: tuple[int, int],
               gain: float = 1.0, dtype=np.float32) -> np.ndarray:
    a = rng.normal(0.0, 1.0, size=shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return (gain * q[: shape[0], : shape[1]]).astype(dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               seed: int = 0, step: float = 1e-5,
               max_coords_per_input: int | None = None) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` maps the given tensors to an output tensor; the check projects the
    output onto a fixed random vector to obtain a scalar.  Inputs must be
    float64.  Returns max over checked coordinates of
    ``|g_ad - g_fd| / max(1, |g_fd|)``.  When ``max_coords_per_input`` is set,
    a random subset of coordinates per input is checked (needed for composite
    models where exhaustive differencing is impractical).
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    proj = rng.normal(size=out.shape)

    def scalar_of(o: Tensor) -> float:
        return float((o.data * proj).sum())

    loss = tsum(mul(out, Tensor(proj)))
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    max_err = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = np.arange(n)
        gflat = g.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = scalar_of(fn(*inputs))
            flat[c] = orig - step
            f_minus = scalar_of(fn(*inputs))
            flat[c] = orig
            g_fd = (f_plus - f_minus) / (2 * step)
            err = abs(gflat[c] - g_fd) / max(1.0, abs(g_fd))
            if err > max_err:
                max_err = err
    return max_err
