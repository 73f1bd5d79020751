"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every arithmetic result remembers the tensors it was computed from and a
closure that maps the output gradient onto gradients for those inputs.
:func:`backward` linearises that graph into a :class:`Tape` (topological
order) and replays it in reverse.

Broadcasting is deliberately narrow: operands must have equal shapes, one
of them must be a scalar, or the smaller shape must be a suffix of the
larger one (bias rows, per-feature scales).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, fields, is_dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "Gradients",
    "GradCheckReport",
    "ShapeError",
    "NotOnTapeError",
    "as_tensor",
    "custom_op",
    "no_grad",
    "grad_enabled",
    "matmul",
    "softmax",
    "softmax_rows",
    "elementwise",
    "concat",
    "stack",
    "einsum",
    "backward",
    "grad_check",
    "grad_check_params",
    "named_tensors",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NotOnTapeError(KeyError):
    """A gradient was requested for a tensor the loss does not depend on."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensor extents must be positive, got shape %s" % (arr.shape,))
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensors must hold finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _sub(self, as_tensor(other))

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _result_unary(self, -self.data, lambda g: (-g,), "neg")

    def __pow__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("only constant exponents are supported")
        k = float(k)
        x = self.data
        if k == 2.0:
            return _result_unary(self, x * x, lambda g: (g * 2.0 * x,), "pow")
        return _result_unary(self, x**k, lambda g: (g * k * x ** (k - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        shape = self.data.shape
        out = self.data[index]

        fancy = _is_fancy(index)

        def bw(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return Tensor._result(np.array(out), (self,), bw, "getitem")

    # -- shape ops -----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _result_unary(self, self.data.reshape(shape), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _result_unary(self, self.data.transpose(axes), lambda g: (g.transpose(inv),), "transpose")

    def swap_last(self) -> "Tensor":
        """Swap the two trailing axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(out), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- pointwise -----------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return _result_unary(self, y, lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        return _result_unary(self, np.log(x), lambda g: (g / x,), "log")

    def tanh(self):
        y = np.tanh(self.data)
        return _result_unary(self, y, lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        y = _sigmoid(self.data)
        return _result_unary(self, y, lambda g: (g * y * (1.0 - y),), "sigmoid")

    def relu(self):
        mask = self.data > 0
        return _result_unary(self, np.where(mask, self.data, 0.0), lambda g: (g * mask,), "relu")

    def silu(self):
        x = self.data
        s = _sigmoid(x)
        return _result_unary(self, x * s, lambda g: (g * (s + x * s * (1.0 - s)),), "silu")

    def gelu(self):
        # tanh approximation
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        x2 = x * x
        t = np.tanh(c * x * (1.0 + 0.044715 * x2))
        y = 0.5 * x * (1.0 + t)

        def bw(g):
            du = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

        return _result_unary(self, y, bw, "gelu")


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in parts)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.multiply(x, 0.5)
    np.tanh(y, out=y)
    y += 1.0
    y *= 0.5
    return y


def as_tensor(x) -> Tensor:
    """Wrap arrays and numbers as constant tensors; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.op = "const"
    out._parents = ()
    out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Record a primitive whose backward rule maps out-grad to per-parent grads."""
    return Tensor._result(data, tuple(parents), backward, name)


def _result_unary(x: Tensor, data, bw, op):
    return Tensor._result(data, (x,), bw, op)


# -- broadcasting ------------------------------------------------------------
def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    x, y = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * y, x.shape) if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        )

    return Tensor._result(x * y, (a, b), bw, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "div")
    x, y = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / y, x.shape) if a.requires_grad else None,
            _unbroadcast(-g * x / (y * y), y.shape) if b.requires_grad else None,
        )

    return Tensor._result(x / y, (a, b), bw, "div")


# -- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the two trailing axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    (shared across the batch) or has exactly the same batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim == 0 or y.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if y.ndim > 2 and x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ between {x.shape} and {y.shape}")
    k_a = x.shape[-1]
    k_b = y.shape[0] if y.ndim == 1 else y.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner extents differ, shapes {x.shape} and {y.shape}")
    out = x @ y

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if y.ndim == 1:
                ga = g[..., None] * y
            else:
                gg = g if x.ndim > 1 else g[None, :]
                ga = gg @ np.swapaxes(y, -1, -2)
                if x.ndim == 1:
                    ga = ga.reshape(x.shape)
        if b.requires_grad:
            if y.ndim == 1:
                gb = np.einsum("...k,...->k", x, g)
            elif y.ndim == 2:
                x2 = x.reshape(-1, k_a)
                gb = x2.T @ g.reshape(x2.shape[0], -1)
            else:
                gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), bw, "softmax")


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    return softmax(x, axis=-1)


_UNARY = {"sigmoid", "tanh", "exp", "relu", "gelu", "silu", "log", "neg"}


def elementwise(op: str, *args, factor: float | None = None) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``mul``, ``sigmoid`` ...)."""
    if op in ("add", "sub", "mul", "div"):
        a, b = (as_tensor(v) for v in args)
        return {"add": _add, "sub": _sub, "mul": _mul, "div": _div}[op](a, b)
    if op == "scale":
        (a,) = args
        if factor is None:
            raise ValueError("scale needs a factor")
        return as_tensor(a) * float(factor)
    if op in _UNARY:
        (a,) = args
        a = as_tensor(a)
        return -a if op == "neg" else getattr(a, op)()
    raise ValueError(f"unknown elementwise op {op!r}")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(out, ts, bw, "stack")


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (no ellipsis, no repeated index per operand).

    Each operand's indices must appear in the output or another operand,
    which keeps every backward rule another einsum.
    """
    if "..." in subscripts or "->" not in subscripts:
        raise ValueError("einsum needs explicit '->' output and no ellipsis")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    ts = [as_tensor(t) for t in operands]
    if len(in_subs) != len(ts):
        raise ValueError("einsum: operand count does not match subscripts")
    for sub, t in zip(in_subs, ts):
        if len(sub) != t.ndim or len(set(sub)) != len(sub):
            raise ShapeError(f"einsum: subscripts {sub!r} do not fit shape {t.shape}")
    for i, sub in enumerate(in_subs):
        others = set(out_sub).union(*(in_subs[j] for j in range(len(ts)) if j != i))
        if not set(sub) <= others:
            raise ValueError(f"einsum: operand {i} has indices summed only within itself")
    datas = [t.data for t in ts]
    out = np.einsum(subscripts, *datas)

    def bw(g):
        grads = []
        for i, (sub, t) in enumerate(zip(in_subs, ts)):
            if not t.requires_grad:
                grads.append(None)
                continue
            rest = [in_subs[j] for j in range(len(ts)) if j != i]
            args = [datas[j] for j in range(len(ts)) if j != i]
            expr = ",".join(rest + [out_sub]) + "->" + sub
            grads.append(np.einsum(expr, *args, g))
        return tuple(grads)

    return Tensor._result(np.asarray(out), ts, bw, "einsum")


# -- tape and reverse pass -------------------------------------------------------
@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


class Tape:
    """Topologically ordered record of every tracked node feeding ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topological(root)

    @property
    def entries(self) -> list[TapeEntry]:
        ids = {id(n): i for i, n in enumerate(self.nodes)}
        return [
            TapeEntry(n.op, tuple(ids[id(p)] for p in n._parents if p.requires_grad), ids[id(n)])
            for n in self.nodes
            if not n.is_leaf
        ]

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


class Gradients(dict):
    """Mapping from leaf tensors to their gradient arrays."""

    def __missing__(self, key):
        raise NotOnTapeError(f"{key!r} is not on the tape of this loss")


def backward(loss: Tensor) -> Gradients:
    """Differentiate a scalar ``loss`` with respect to every tracked leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    result = Gradients()
    if not loss.requires_grad:
        return result
    tape = Tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            result[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg
    return result


# -- gradient checking -------------------------------------------------------------
@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_index: int
    analytic: float
    numeric: float
    label: str = ""

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_relative_error < tol


def _check_step(step: float) -> None:
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"finite-difference step must lie in (0, 1e-2], got {step}")


def _scalar_value(out) -> float:
    out = as_tensor(out)
    if out.data.size != 1:
        raise ShapeError(f"checked function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def _compare(analytic: np.ndarray, numeric: np.ndarray, label: str = "") -> GradCheckReport:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    rel = np.abs(a - n) / denom
    i = int(np.argmax(rel))
    return GradCheckReport(float(rel[i]), i, float(a[i]), float(n[i]), label)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` at ``x`` with central differences."""
    _check_step(step)
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    _scalar_value(out)
    analytic = backward(as_tensor(out)).get(probe)
    if analytic is None:
        analytic = np.zeros_like(base)
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            hi = flat.copy()
            lo = flat.copy()
            hi[i] += step
            lo[i] -= step
            fp = _scalar_value(f(Tensor(hi.reshape(base.shape))))
            fm = _scalar_value(f(Tensor(lo.reshape(base.shape))))
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return _compare(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
) -> GradCheckReport:
    """Gradient check of a closure with respect to several parameter leaves.

    Each parameter's storage is swapped for a perturbed copy during the
    numeric sweep and restored afterwards.
    """
    _check_step(step)
    named = list(params.items()) if isinstance(params, dict) else [(str(i), p) for i, p in enumerate(params)]
    out = loss_fn()
    _scalar_value(out)
    grads = backward(as_tensor(out))
    worst = GradCheckReport(0.0, 0, 0.0, 0.0)
    offset = 0
    for name, p in named:
        original = p.data
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(original)
        numeric = np.empty(original.size)
        flat = original.reshape(-1)
        try:
            with no_grad():
                for i in range(flat.size):
                    pert = flat.copy()
                    pert[i] += step
                    p.data = pert.reshape(original.shape)
                    fp = _scalar_value(loss_fn())
                    pert[i] -= 2.0 * step
                    p.data = pert.reshape(original.shape)
                    fm = _scalar_value(loss_fn())
                    numeric[i] = (fp - fm) / (2.0 * step)
        finally:
            p.data = original
        rep = _compare(analytic, numeric, name)
        if rep.max_relative_error > worst.max_relative_error or offset == 0:
            worst = GradCheckReport(rep.max_relative_error, offset + rep.worst_index, rep.analytic, rep.numeric, name)
        offset += original.size
    return worst


# -- parameter containers ------------------------------------------------------------
def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts yielding ``(dotted_name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{k}" if prefix else str(k))
