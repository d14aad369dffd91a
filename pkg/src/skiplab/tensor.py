"""Minimal reverse-mode automatic differentiation on numpy buffers.

Supplies exactly the kernels the toy transformer, the routers, and the
losses need: matmul, elementwise arithmetic, softmax/log-softmax, silu,
rms_norm, embedding lookup, reductions, slicing, and a fused
cross-entropy. Graphs are define-by-run: every op on tensors that
require grad records a backward closure; `backward(loss)` walks the
graph once in reverse topological order and is rejected on a second
call. Gradients accumulate into `.grad` and are zeroed explicitly
between steps (double-backward is unsupported).

float64 is the intended dtype for gradient checks, float32 for training
loops. Binary ops require matching dtypes so precision never changes
silently mid-graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "embedding",
    "softmax",
    "log_softmax",
    "silu",
    "rms_norm",
    "cross_entropy",
    "harden",
    "concat",
    "backward",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, _negated(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported kernel")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def abs(self):
        return tabs(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _negated(x):
    return neg(x) if isinstance(x, Tensor) else -x


def _result(data, parents, bwd) -> Tensor:
    """Wrap an op result; records the backward rule only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._bwd = bwd if req else None
    return out


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        # Copy: g may alias the consumer's grad buffer or be a view.
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


# -- elementwise ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out_data = a.data + s

        def bwd(out):
            if a.requires_grad:
                _accum(a, out.grad)

        return _result(out_data, (a,), bwd)

    _check_dtypes(a, b, "add")
    out_data = a.data + b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.data.shape))

    return _result(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(out):
        if a.requires_grad:
            _accum(a, -out.grad)

    return _result(-a.data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out_data = a.data * s

        def bwd(out):
            if a.requires_grad:
                _accum(a, out.grad * s)

        return _result(out_data, (a,), bwd)

    _check_dtypes(a, b, "mul")
    out_data = a.data * b.data

    def bwd(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _result(out_data, (a, b), bwd)


def tabs(a: Tensor) -> Tensor:
    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad * np.sign(a.data))

    return _result(np.abs(a.data), (a,), bwd)


# -- matmul -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (m,k)@(k,n); (...,k)@(k,n) contracting the last
    axis; and stacked (B,m,k)@(B,k,n) with identical leading dims.
    """
    _check_dtypes(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree for shapes {ad.shape} and {bd.shape}")

    if bd.ndim == 2:
        out_data = ad @ bd

        def bwd(out):
            if a.requires_grad:
                _accum(a, out.grad @ bd.T)
            if b.requires_grad:
                g = out.grad.reshape(-1, bd.shape[1])
                _accum(b, ad.reshape(-1, ad.shape[-1]).T @ g)

        return _result(out_data, (a, b), bwd)

    if ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions disagree for shapes {ad.shape} and {bd.shape}")
    out_data = ad @ bd

    def bwd(out):
        if a.requires_grad:
            _accum(a, out.grad @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(ad, -1, -2) @ out.grad)

    return _result(out_data, (a, b), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `weight[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    n = weight.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range [0, {n})")
    out_data = weight.data[ids]

    def bwd(out):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.ravel(), out.grad.reshape(-1, weight.data.shape[1]))

    return _result(out_data, (weight,), bwd)


# -- nonlinearities ---------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; inputs must be finite."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise ValueError("softmax: input contains NaN or Inf")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        if x.requires_grad:
            y = out.data
            g = out.grad
            _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(out_data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise ValueError("log_softmax: input contains NaN or Inf")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(out):
        if x.requires_grad:
            g = out.grad
            _accum(x, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def bwd(out):
        if x.requires_grad:
            _accum(x, out.grad * sig * (1.0 + x.data * (1.0 - sig)))

    return _result(out_data, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain."""
    if eps <= 0:
        raise ValueError("rms_norm: eps must be positive")
    _check_dtypes(x, gain, "rms_norm")
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise ValueError(f"rms_norm: gain shape {gain.data.shape} does not match feature dim {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    normed = x.data * inv

    def bwd(out):
        g = out.grad * gain.data
        if x.requires_grad:
            dot = np.mean(x.data * g, axis=-1, keepdims=True)
            _accum(x, inv * g - x.data * (inv ** 3) * dot)
        if gain.requires_grad:
            contrib = out.grad * normed
            _accum(gain, contrib.reshape(-1, d).sum(axis=0))

    return _result(normed * gain.data, (x, gain), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` under `logits`.

    Accepts (N,V) or (B,S,V) logits with matching integer targets.
    """
    ld = logits.data
    flat = ld.reshape(-1, ld.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ValueError(f"cross_entropy: {flat.shape[0]} positions but {tgt.shape[0]} targets")
    v = flat.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    n = flat.shape[0]
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez)
    nll = lse[:, 0] - z[np.arange(n), tgt]
    out_data = np.asarray(nll.mean(), dtype=ld.dtype)

    def bwd(out):
        if logits.requires_grad:
            p = ez / sez
            p[np.arange(n), tgt] -= 1.0
            _accum(logits, (p * (out.grad / n)).reshape(ld.shape))

    return _result(out_data, (logits,), bwd)


# -- reductions and shape ops ----------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        if x.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape))

    return _result(np.asarray(out_data, dtype=x.data.dtype), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(out):
        if x.requires_grad:
            _accum(x, out.grad.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(out):
        if x.requires_grad:
            _accum(x, out.grad.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop] with zero-padded backward."""

    def bwd(out):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[..., start:stop] += out.grad

    return _result(x.data[..., start:stop], (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    parts = list(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    out_data = np.concatenate([t.data for t in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.data.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(idx)])

    return _result(out_data, parts, bwd)


def harden(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    """Straight-through discretization.

    Forward value is exactly `hard_values`; backward passes the output
    gradient to `soft` unchanged, so optimization follows the soft
    relaxation while the forward pass sees discrete decisions.
    """
    hv = np.asarray(hard_values, dtype=soft.data.dtype)
    if hv.shape != soft.data.shape:
        raise ValueError(f"harden: hard shape {hv.shape} does not match soft shape {soft.data.shape}")

    def bwd(out):
        if soft.requires_grad:
            _accum(soft, out.grad)

    return _result(hv, (soft,), bwd)


# -- backward ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor reachable from a scalar `loss`.

    Visits each node exactly once in reverse topological order. A graph
    is single-use: calling backward twice on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward: graph already consumed; build a fresh forward pass")
    loss._done = True
    if not loss.requires_grad:
        return

    # Iterative DFS; ordering is deterministic because it follows the
    # recorded parent tuples, never set iteration.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is not None:
            node._bwd(node)
            node._bwd = None
            node._parents = ()
