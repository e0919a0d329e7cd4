"""Dense float tensors with a reverse-mode gradient tape.

Everything learnable in the package (prompts, classifiers, the backbone during
pretraining) is a :class:`Tensor`. Arrays are numpy ``float32`` by default; the
:func:`precision` context switches the dtype of newly created tensors, which the
finite-difference oracle uses to evaluate functions in ``float64``.

Reductions are plain numpy reductions on fixed shapes, so identical inputs and
op order give bitwise-identical results.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GradcoreError",
    "ShapeError",
    "Tensor",
    "tensor",
    "parameter",
    "precision",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "broadcast_to",
    "reshape",
    "swapaxes",
    "select",
    "take_rows",
    "sum_all",
    "mean_all",
    "layer_norm",
    "gelu",
    "softmax",
    "normalize",
    "cosine_similarity",
    "cosine_matrix",
    "cross_entropy",
    "LrSchedule",
    "cosine_anneal_lr",
    "SGD",
    "sgd_momentum_step",
    "GradCheckReport",
    "finite_diff_grad_check",
]


class GradcoreError(RuntimeError):
    pass


class ShapeError(GradcoreError, ValueError):
    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


_state = {"dtype": np.float32, "grad_enabled": True}


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` inside the block."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        # trainable leaves start at zero so an unused parameter reads as "no signal"
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


def _node(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    node = Tensor(out)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._parents = tuple(parents)
        node._backward = backward_fn
    return node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(primitive: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def back(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar without promoting the dtype."""
    c = a.data.dtype.type(c)
    out = a.data * c
    return _node(out, (a,), lambda g: (g * c,))


# ------------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # (..., N, D) @ (D, E) as one 2-D product
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", *[x.shape for x in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        ]

    return _node(out, tensors, back)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _node(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one position along ``axis`` (the axis is dropped)."""
    ax = axis % a.ndim
    if not -a.shape[ax] <= index < a.shape[ax]:
        raise ShapeError("select", a.shape, (index,))
    out = np.take(a.data, index, axis=ax)

    def back(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return _node(out, (a,), back)


def take_rows(table: Tensor, rows: Sequence[int]) -> Tensor:
    """Row gather from a 2-D table (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.int64)
    if table.ndim != 2 or (rows.size and (rows.min() < 0 or rows.max() >= table.shape[0])):
        raise ShapeError("take_rows", table.shape, tuple(rows.tolist()))
    out = table.data[rows]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, rows, g)
        return (full,)

    return _node(out, (table,), back)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _node(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),))


# ----------------------------------------------------------------- nonlinear


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        if not x.requires_grad:
            return None, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        if not gamma.requires_grad:
            return gx, None, None
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    dt = x.data.dtype.type
    c, k = dt(_GELU_C), dt(0.044715)
    x2 = x.data * x.data
    t = np.tanh(c * x.data * (1 + k * x2))
    half = dt(0.5)
    out = half * x.data * (1 + t)

    def back(g):
        du = c * (1 + 3 * k * x2)
        return (g * (half * (1 + t) + half * x.data * (1 - t * t) * du),)

    return _node(out, (x,), back)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    p = _softmax_np(z.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (z,), back)


def normalize(x: Tensor) -> Tensor:
    """L2-normalise along the last axis. Zero vectors are an error, not an epsilon.

    The forward divide runs in float64 and rounds once, so an exactly
    representable positive rescaling of ``x`` gives bitwise-identical output.
    """
    x64 = x.data.astype(np.float64)
    norms64 = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    if np.any(norms64 == 0):
        raise GradcoreError("normalize: zero-norm vector has no direction")
    y = (x64 / norms64).astype(x.data.dtype)
    norms = norms64.astype(x.data.dtype)

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _node(y, (x,), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of paired vectors; returns shape ``a.shape[:-1]``."""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    try:
        na, nb = normalize(a), normalize(b)
    except GradcoreError:
        raise GradcoreError("cosine_similarity: zero-norm vector") from None
    prod = mul(na, nb)
    out = prod.data.sum(axis=-1)
    return _node(out, (prod,), lambda g: (np.broadcast_to(g[..., None], prod.shape).copy(),))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine: ``(N, D) x (M, D) -> (N, M)``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", a.shape, b.shape)
    try:
        na, nb = normalize(a), normalize(b)
    except GradcoreError:
        raise GradcoreError("cosine_matrix: zero-norm vector") from None
    return matmul(na, swapaxes(nb, 0, 1))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Fused with log-sum-exp so large logits stay finite.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise GradcoreError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def back(g):
        p = _softmax_np(z)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _node(out, (logits,), back)


# ------------------------------------------------------------------ backward


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf.

    The tape is released afterwards; a second call on the same loss raises.
    """
    if loss._consumed:
        raise GradcoreError("backward: tape already consumed; re-run the forward pass")
    if loss.data.size != 1 or loss.ndim != 0:
        raise GradcoreError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradcoreError("backward: loss does not depend on any trainable tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# ----------------------------------------------------------------- optimiser


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_steps <= 0:
            raise ValueError("LrSchedule needs base_lr > 0 and total_steps > 0")


def cosine_anneal_lr(step: int, schedule: LrSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    return schedule.base_lr * (1 + math.cos(math.pi * step / schedule.total_steps)) / 2


@dataclass
class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    params: list[Tensor]
    lr: float = 0.1
    momentum: float = 0.9
    buffers: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(self.params)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        sgd_momentum_step(self.params, self, self.lr if lr is None else lr)


def sgd_momentum_step(params: Iterable[Tensor], state: SGD, lr: float) -> None:
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradcoreError(f"sgd step: parameter {p.name or i!r} has no gradient")
    for p, buf in zip(params, state.buffers):
        buf *= buf.dtype.type(state.momentum)
        buf += p.grad
        if lr != 0:
            p.data -= p.data.dtype.type(lr) * buf
        p.grad = np.zeros_like(p.data)


# ------------------------------------------------------------ gradient check


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def finite_diff_grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    h: float = 1e-3,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` receives one tensor per entry of ``point`` and returns a scalar.
    Analytic gradients come from a float32 tape. The numeric side re-evaluates
    ``fn`` under float64 so that rounding noise (~eps32 * |f| / h) does not
    swamp the comparison. The error is ``max|a - n| / max(max|a|, max|n|)``.
    """
    single = isinstance(point, np.ndarray)
    points = [np.asarray(point, dtype=np.float64)] if single else [
        np.asarray(p, dtype=np.float64) for p in point
    ]

    leaves = [Tensor(p.astype(np.float32), requires_grad=True) for p in points]
    for leaf in leaves:
        leaf.zero_grad()
    out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise GradcoreError("finite_diff_grad_check: non-finite value at the point")
    if out.requires_grad:
        backward(out)
    analytic = [leaf.grad.astype(np.float64) for leaf in leaves]

    def evaluate(arrays):
        with precision(np.float64), no_grad():
            value = fn(*[Tensor(a) for a in arrays]).data
        value = float(value)
        if not math.isfinite(value):
            raise GradcoreError("finite_diff_grad_check: non-finite value near the point")
        return value

    numeric = []
    for k, base in enumerate(points):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            args = [p.copy() for p in points]
            args[k][idx] = base[idx] + h
            fp = evaluate(args)
            args[k][idx] = base[idx] - h
            fm = evaluate(args)
            g[idx] = (fp - fm) / (2 * h)
        numeric.append(g)

    max_abs = max((float(np.max(np.abs(a - n))) if a.size else 0.0) for a, n in zip(analytic, numeric))
    scale_ = max(
        max((float(np.max(np.abs(a))) if a.size else 0.0) for a in analytic),
        max((float(np.max(np.abs(n))) if n.size else 0.0) for n in numeric),
    )
    rel = max_abs / scale_ if scale_ > 0 else 0.0
    return GradCheckReport(rel, max_abs, rel < tol, analytic, numeric)
