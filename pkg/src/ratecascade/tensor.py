"""Dense tensors with reverse-mode automatic differentiation.

Arrays are stored as numpy ndarrays. Every differentiable operation records a
:class:`TapeNode` on its output holding the parent tensors and a closure that
maps the output gradient to parent gradients. :func:`backward` walks the
resulting DAG once in reverse topological order and accumulates gradients into
tracked leaf tensors.

Two precision modes exist: float64 for verification (finite-difference
checks) and float32 for training speed. Operations keep the dtype of their
operands; scalars are cast to the dtype of the tensor they meet.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

RMS_EPS = 1e-6

_local = threading.local()
_default_dtype = np.float64
_mac_lock = threading.Lock()
_mac_counters: list[list[int]] = []


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def count_macs():
    """Count multiply-adds performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    counter = [0]
    with _mac_lock:
        _mac_counters.append(counter)
    try:
        yield counter
    finally:
        with _mac_lock:
            _mac_counters.remove(counter)


@dataclass(eq=False)
class TapeNode:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, bw) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, bw)
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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), "mul", bw)


def elementwise(a, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting.

    A 2-D right operand is shared across all leading axes of the left one,
    which is the linear-layer case.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    k = ad.shape[-1]
    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError:
            raise DimensionError(
                f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None
    if _mac_counters:
        macs = int(out.size) * k
        with _mac_lock:
            for c in _mac_counters:
                c[0] += macs

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, (a, b), "matmul", bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), "softmax", bw)


def rms_norm(a: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if a.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise DimensionError(f"rms_norm: last extent of {a.shape} != gain length {gain.shape}")
    x = a.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * r
    gd = gain.data

    def bw(g):
        gx = gg = None
        if a.requires_grad:
            dxhat = g * gd
            gx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, gd.shape[0]).sum(axis=0)
        return gx, gg

    return _result(xhat * gd, (a, gain), "rms_norm", bw)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))

    def bw(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _result(x * s, (a,), "silu", bw)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis, preserving argument order."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels: leading extents differ: {tensors[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors),
                   "concat", bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size

    def bw(g):
        gd = (2.0 / n) * g * d
        return gd, -gd

    return _result(np.asarray((d * d).mean(), dtype=d.dtype), (a, b), "mse", bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum",
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), "mean",
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose",
                   lambda g: (g.transpose(inv),))


def _swap_pairs(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def pair_swap(a: Tensor) -> Tensor:
    """Map each coordinate pair (x0, x1) to (-x1, x0): a quarter-turn rotation."""
    if a.shape[-1] % 2:
        raise DimensionError(f"pair_swap: last extent {a.shape[-1]} is odd")
    return _result(_swap_pairs(a.data), (a,), "pair_swap", lambda g: (-_swap_pairs(g),))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that is not tracked")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` with respect to ``array`` (mutated in place)."""
    out = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    ``fn`` receives one tracked Tensor per input array and must return a scalar
    Tensor. Returns the largest normwise relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def value(arr=arr):
            with no_grad():
                return float(fn(*[Tensor(x) for x in arrays]).data)
        numeric = numerical_gradient(value, arr, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
