from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_BIAS = -1e9

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, a: int, b: int):
        return transpose(self, a, b)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def backward(self, grad=None, reverse_parents: bool = False):
        backward(self, grad, reverse_parents=reverse_parents)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- tape -------------------------------------------------------------------


def topological_order(root: Tensor, reverse_parents: bool = False) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its parents.

    ``reverse_parents`` visits parents in the opposite order, producing a
    different but equally valid ordering.
    """
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
        parents = node._parents if reverse_parents else node._parents[::-1]
        for p in parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None, reverse_parents: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that is not part of a graph")
    if grad is None:
        if loss.size != 1:
            raise RuntimeError("backward without an explicit gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(topological_order(loss, reverse_parents)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        k = a.dtype.type(b)
        return _make(a.data * k, (a,), lambda g: (g * k,))
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = xd * xd
    t = np.tanh(c * xd * (1 + k * x2))
    y = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _make(y, (x,), bw)


# --- shape ----------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n, d = table.shape

    def bw(g):
        out = np.zeros((n, d), dtype=g.dtype)
        np.add.at(out, ids.ravel(), g.reshape(-1, d))
        return (out,)

    return _make(table.data[ids], (table,), bw)


# --- reductions -------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([src[a] for a in axes]))
    y = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, src).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), bw)


# --- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least two axes")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        return (
            _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
            _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape),
        )

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input dim {xd.shape[-1]} != weight rows {wd.shape[0]}")
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    n_in, n_out = wd.shape

    def bw(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ wd.T
        gw = xd.reshape(-1, n_in).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, bw)


# --- normalisation / attention pieces --------------------------------------------------


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a keep-mask broadcastable to ``x``: truthy positions are kept,
    the rest receive an additive bias of ``MASK_BIAS`` before normalisation.
    """
    z = x.data
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(keep, z.shape).any(axis=-1)):
            raise ValueError("softmax over a fully masked row (empty key sequence)")
        z = z + np.where(keep, 0.0, MASK_BIAS).astype(z.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    d = xd.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(y, (x, gain, bias), bw)


def _dropout_generator(key) -> np.random.Generator:
    digest = hashlib.blake2b(repr(key).encode(), digest_size=16).digest()
    k = np.frombuffer(digest, dtype="<u8")
    return np.random.Generator(np.random.Philox(key=k))


def dropout(x: Tensor, rate: float, train: bool, key=None) -> Tensor:
    """Inverted dropout.

    The keep-mask is drawn from a counter-based generator keyed by ``key``
    (typically ``(seed, step, parameter path)``), so a given key always
    drops the same positions.
    """
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = _dropout_generator(key).random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# --- losses ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Binary cross entropy summed over the last axis."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {z.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid_np(z)
    return _make(per.sum(axis=-1), (logits,), lambda g: ((p - t) * g[..., None],))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
