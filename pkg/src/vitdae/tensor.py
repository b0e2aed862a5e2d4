"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` holding a closure
that maps the output gradient to one gradient per parent.  ``backward`` replays
those closures in reverse topological order and then drops the recorded graph.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
scalar operand.  Layer-style broadcasts (biases, per-channel affines, positional
tables) are separate ops with their own reduction in the backward pass.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording a tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        The recorded graph is released afterwards, so a second call needs a
        fresh forward pass.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g.astype(node.data.dtype, copy=False)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"internal gradient shape {pg.shape} does not match parent {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ValueError(
        f"dimension error in {op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-vs-tensor"
    )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    th = np.tanh(_GELU_C * (x + 0.044715 * x**3))

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _result(0.5 * x * (1.0 + th), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(y), (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    return _result(np.repeat(a.data[None], n, axis=0), (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions, when present, must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"dimension error in matmul: {a.shape} @ {b.shape}")

    def back(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dimension error in linear: input features {x.shape[-1]} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(lead + (w.shape[1],)), parents, back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing slice of ``x`` whose shape equals ``b.shape``."""
    if x.shape[x.ndim - b.ndim:] != b.shape:
        raise ValueError(f"dimension error in bias_add: {x.shape} vs {b.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def channel_affine(x: Tensor, s: Tensor, b: Tensor) -> Tensor:
    """Per-sample, per-channel ``s * x + b`` for ``x`` of shape (B, C, ...), ``s``/``b`` of (B, C)."""
    if s.shape != x.shape[:2] or b.shape != x.shape[:2]:
        raise ValueError(f"dimension error in channel_affine: {x.shape} vs {s.shape}/{b.shape}")
    extra = (1,) * (x.ndim - 2)
    sv = s.data.reshape(s.shape + extra)
    spatial = tuple(range(2, x.ndim))

    def back(g):
        return g * sv, (g * x.data).sum(axis=spatial), g.sum(axis=spatial)

    return _result(x.data * sv + b.data.reshape(b.shape + extra), (x, s, b), back)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (B, C, H, W) input with (F, C, kh, kw) filters."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"dimension error in conv2d: input {x.shape}, weight {w.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise ValueError(
            f"non-integral output extent: ({H}+2*{pad}-{kh})/{stride} or ({W}+2*{pad}-{kw})/{stride}"
        )
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _kernels.im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(F, -1)
    y = cols @ wmat.T
    if b is not None:
        y += b.data
    out = np.ascontiguousarray(y.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = _kernels.col2im(g2 @ wmat, (B, C, Hp, Wp), kh, kw, stride)
        if pad:
            gx = gx[:, :, pad:pad + H, pad:pad + W]
        grads = (np.ascontiguousarray(gx), gw)
        return grads if b is None else grads + (g2.sum(axis=0),)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    y = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _result(y, (x,), back)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def back(g):
        return (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),)

    return _result(y, (x,), back)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _normalize_last(xr: np.ndarray, eps: float):
    mu = xr.mean(axis=-1, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_last_back(gxh: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (
        gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
    )


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional per-feature affine."""
    return normalization("layer", x, gain, bias, eps)


def group_norm(x: Tensor, groups: int, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, ...) input over channel groups and spatial positions."""
    return normalization("group", x, gain, bias, eps, groups=groups)


def normalization(kind: str, x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = 1e-5, groups: int = 1) -> Tensor:
    if eps <= 0:
        raise ValueError(f"normalization eps must be positive, got {eps}")
    if kind == "layer":
        xr = x.data
        affine_shape = x.shape[-1:]
        bshape = affine_shape
    elif kind == "group":
        C = x.shape[1]
        if groups < 1 or C % groups:
            raise ValueError(f"group count {groups} does not divide {C} channels")
        xr = x.data.reshape(x.shape[0], groups, -1)
        affine_shape = (C,)
        bshape = (1, C) + (1,) * (x.ndim - 2)
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")
    for p in (gain, bias):
        if p is not None and p.shape != affine_shape:
            raise ValueError(f"dimension error in {kind} norm: affine {p.shape} vs {affine_shape}")

    xhat_r, inv = _normalize_last(xr, eps)
    xhat = xhat_r.reshape(x.shape)
    y = xhat * gain.data.reshape(bshape) if gain is not None else xhat.copy()
    if bias is not None:
        y += bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != (x.ndim - 1 if kind == "layer" else 1))

    def back(g):
        gxh = g * gain.data.reshape(bshape) if gain is not None else g
        gx = _normalize_last_back(gxh.reshape(xr.shape), xhat_r, inv).reshape(x.shape)
        out = [gx]
        if gain is not None:
            out.append((g * xhat).sum(axis=red))
        if bias is not None:
            out.append(g.sum(axis=red))
        return tuple(out)

    parents = (x,) + tuple(p for p in (gain, bias) if p is not None)
    return _result(y, parents, back)


# ---------------------------------------------------------------------------
# attention and losses
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(dh)) v`` over (B, heads, tokens, dh) inputs."""
    if q.ndim != 4 or q.shape != k.shape or k.shape[:3] != v.shape[:3]:
        raise ValueError(f"dimension error in attention: q{q.shape} k{k.shape} v{v.shape}")
    c = 1.0 / math.sqrt(q.shape[-1])
    p = softmax((q.data @ np.swapaxes(k.data, -1, -2)) * c)

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return _result(p @ v.data, (q, k, v), back)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back)
