"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive executed while gradients are enabled and at least one input
requires grad appends a :class:`Node` to the module tape.  :func:`backward`
walks the tape in reverse execution order, visiting each node once.

Storage is a C-contiguous numpy array.  Slicing and transposition copy; there
are no strided views.  The default float type is 32-bit; use
``precision(np.float64)`` for gradient-check work.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

LAYER_NORM_EPS = 1e-5

_default_dtype: type = np.float32
_grad_enabled = True


def default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported float type {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (e.g. to float64)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array without copying
        t = cls.__new__(cls)
        t.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Append-only record of executed primitives, in execution order."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


TAPE = Graph()


def reset_tape() -> None:
    TAPE.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(np.asarray(out_data))
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, out, backward_fn)
        TAPE.record(out._node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every requires-grad ancestor of a scalar ``loss``.

    Leaf gradients accumulate across calls until reset with ``zero_grad``;
    interior tensors receive the gradient of this pass.  The tape is cleared
    afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss is not on the tape (no input requires grad)")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(TAPE.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
    if not retain_graph:
        TAPE.clear()


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = b
        return _record("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x2 = x.data.reshape(-1, x.shape[-1]) if x.ndim else x.data.reshape(1, 1)
    y = kernels.gelu_fwd(x2).reshape(x.shape)

    def bw(g):
        return (kernels.gelu_bwd(x2, np.ascontiguousarray(g, dtype=x2.dtype).reshape(x2.shape)).reshape(x.shape),)

    return _record("gelu", y, (x,), bw)


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _record("reshape", out.copy(), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _record("transpose", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _record("concat", out, xs, lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis)))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one GEMM over the flattened leading axes instead of a batched loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bw)


# --- reductions ------------------------------------------------------------

def _check_axis(x: Tensor, axis) -> None:
    if x.data.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise ContractError(f"empty reduction axis {axis} for shape {x.shape}")


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_axis(x, axis)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis(x, axis)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    _check_axis(x, -1)
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = kernels.softmax_fwd(x2)

    def bw(g):
        return (kernels.softmax_bwd(y2, np.ascontiguousarray(g, dtype=y2.dtype).reshape(y2.shape)).reshape(x.shape),)

    return _record("softmax", y2.reshape(x.shape), (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    _check_axis(x, -1)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    x2 = x.data.reshape(-1, d)
    # affine params follow the activation dtype inside the kernels
    gd = np.ascontiguousarray(gamma.data, dtype=x.dtype)
    bd = np.ascontiguousarray(beta.data, dtype=x.dtype)
    y2, xhat, rstd = kernels.layer_norm_fwd(x2, gd, bd, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g, dtype=x.dtype).reshape(-1, d), xhat, rstd, gd)
        return dx.reshape(x.shape), dg.astype(gamma.dtype, copy=False), db.astype(beta.dtype, copy=False)

    return _record("layer_norm", y2.reshape(x.shape), (x, gamma, beta), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over ``[batch, seq, dim]`` inputs."""
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention needs equal [batch, seq, dim] inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[2] % num_heads:
        raise DimensionError(f"dim {q.shape[2]} not divisible by {num_heads} heads")
    _check_axis(q, 1)
    dt = q.dtype
    qd, kd, vd = (np.ascontiguousarray(t.data, dtype=dt) for t in (q, k, v))
    ctx, probs = kernels.attention_fwd(qd, kd, vd, num_heads)

    def bw(g):
        dq, dk, dv = kernels.attention_bwd(np.ascontiguousarray(g, dtype=dt), qd, kd, vd, probs)
        return dq, dk.astype(k.dtype, copy=False), dv.astype(v.dtype, copy=False)

    return _record("attention", ctx, (q, k, v), bw)


# --- lookup and losses -----------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"embedding id out of range [0, {n})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0 or logits.shape[1] == 0:
        raise ContractError(f"cross_entropy needs non-empty [N, k] logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data
    rows = np.arange(z.shape[0])
    top = z.argmax(axis=1)
    shifted = z - z[rows, top][:, None]
    e = np.exp(shifted)
    # log-sum-exp of shifted rows as log1p of the non-max terms, accurate near zero
    rest = e.copy()
    rest[rows, top] = 0
    lse = np.log1p(rest.sum(axis=1))
    losses = lse - shifted[rows, labels]
    out = np.asarray(losses.mean(), dtype=z.dtype)
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / z.shape[0]),)

    return _record("cross_entropy", out, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {t.shape}")
    if pred.data.size == 0:
        raise ContractError("mse over an empty tensor")
    diff = pred.data - t
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    return _record("mse", out, (pred,), lambda g: (diff * (2.0 * g / diff.size),))
