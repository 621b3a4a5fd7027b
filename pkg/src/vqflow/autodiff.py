"""Dense tensors with reverse-mode gradient accumulation.

A :class:`Tensor` wraps a numpy array.  Operations executed while a
:class:`GradientTape` is active, and touching at least one tensor with
``requires_grad=True``, are appended to the tape in execution order.  Because
a node is always created after its inputs, walking the tape backwards is a
reverse topological traversal of the graph.

Without an active tape every operation is a plain numpy computation, which is
what inference and scoring use.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return index_select(self, index)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


class GradientTape:
    """Ordered record of primitive applications plus a parameter registry.

    Use as a context manager; operations are recorded only while it is active::

        with GradientTape() as tape:
            loss = model.loss(batch)
        grads = backward(loss, tape)
    """

    def __init__(self, params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] | None = None):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        if params is not None:
            items = params.items() if isinstance(params, Mapping) else params
            for name, p in items:
                self.watch(name, p)

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _node(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp: overflow produced a non-finite value")
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log: non-positive input")
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.logaddexp(0, xd).astype(xd.dtype, copy=False), (x,),
                 lambda g: (g * expit(xd),), "softplus")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# ---------------------------------------------------------------- linear algebra


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied over the trailing dimension of ``x``."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-d, got shape {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1:] != (d_in,):
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, d_in)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, backward, "linear")


# ---------------------------------------------------------------- structure


def _axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = _axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = _axis(axis, x.ndim)
    if int(np.sum(sizes)) != x.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        sl = tuple(sl)

        def backward(g, sl=sl, shape=x.shape, dtype=x.dtype):
            full = np.zeros(shape, dtype=dtype)
            full[sl] = g
            return (full,)

        outs.append(_node(x.data[sl], (x,), backward, "split"))
        start += n
    return outs


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` by integer index array."""
    index = np.asarray(index, dtype=np.intp)
    ax = _axis(axis, x.ndim)
    if index.size and (index.min() < -x.shape[ax] or index.max() >= x.shape[ax]):
        raise DimensionError(f"gather: index out of range for axis of length {x.shape[ax]}")
    out = np.take(x.data, index, axis=ax)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return _node(out, (x,), backward, "gather")


def index_select(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), backward, "index")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[a] for a in axes]))
    if count == 0:
        raise DimensionError(f"mean: empty reduction over shape {src}")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return _node(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward, "mean")


def avg_pool_spatial(h: Tensor, channels_last: bool = False) -> Tensor:
    """Average over the two spatial axes.

    ``h`` is ``[..., D, H, W]`` by default or ``[..., H, W, D]`` with
    ``channels_last=True``; the result is ``[..., D]``.
    """
    if h.ndim < 3:
        raise DimensionError(f"avg_pool_spatial: need at least 3 dims, got shape {h.shape}")
    axes = (-3, -2) if channels_last else (-2, -1)
    if h.shape[axes[0]] < 1 or h.shape[axes[1]] < 1:
        raise DimensionError(f"avg_pool_spatial: empty spatial extent in shape {h.shape}")
    return mean(h, axis=tuple(_axis(a, h.ndim) for a in axes))


# ---------------------------------------------------------------- gradient routing


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def pass_through(value: Tensor, carrier: Tensor) -> Tensor:
    """Forward value of ``value``; backward sends the incoming gradient to ``carrier``."""
    value = as_tensor(value)
    if value.shape != carrier.shape:
        raise DimensionError(f"pass_through: value shape {value.shape} != carrier shape {carrier.shape}")
    return _node(value.data.copy(), (carrier,), lambda g: (g,), "pass_through")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: GradientTape) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Returns the gradients of the tape's registered parameters (zeros for
    registered parameters the loss does not depend on).
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._backward is None and loss.requires_grad:
        loss.grad = pending.pop(id(loss)) if loss.grad is None else loss.grad + 1
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"backward: non-finite gradient produced by primitive '{node.op}'")
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in tape.params.items()
    }


# ---------------------------------------------------------------- oracle


def _fd_entries(size: int, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def finite_difference_report(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``; the
    parameters are perturbed in place and restored afterwards.  The error of
    one entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ContractError("finite_difference_check: eps must be positive")
    first = np.asarray(f().data, dtype=np.float64)
    second = np.asarray(f().data, dtype=np.float64)
    if first.tobytes() != second.tobytes():
        raise ContractError("finite_difference_check: f is not deterministic")

    for p in params.values():
        p.zero_grad()
    with GradientTape(params) as tape:
        loss = f()
    analytic = backward(loss, tape)

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1).astype(np.float64)
        worst = 0.0
        for i in _fd_entries(flat.size, max_entries, rng):
            orig = flat[i]
            hi = flat.dtype.type(orig + eps)
            lo = flat.dtype.type(orig - eps)
            flat[i] = hi
            f_hi = float(f().data)
            flat[i] = lo
            f_lo = float(f().data)
            flat[i] = orig
            numeric = (f_hi - f_lo) / (float(hi) - float(lo))
            err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max over parameters of the relative analytic-vs-numeric gradient error."""
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    report = finite_difference_report(f, params, eps=eps, max_entries=max_entries, seed=seed)
    return max(report.values(), default=0.0)
