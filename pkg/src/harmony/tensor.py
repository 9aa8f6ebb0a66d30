"""Reverse-mode autodiff over float64 numpy arrays.

Define-by-run: every differentiable operation appends one record to the
thread-local Graph, and ``backward`` replays the records in reverse append
order. Gradients accumulate additively into ``Tensor.grad`` until
``zero_grad``. Broadcasting is deliberately narrow: same-shape, a (D,) vector
over the rows of an (L, D) matrix, and scalars. Tensors and the graph they
were recorded on belong to a single thread; independent threads each get
their own graph.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import accel
from .errors import ContractError, ShapeError

_state = threading.local()


def _tls():
    if not hasattr(_state, "graph"):
        _state.graph = Graph()
        _state.grad_enabled = True
    return _state


class Graph:
    """Append-only operation tape; reverse order is a valid topological order."""

    def __init__(self):
        self.records = []

    def append(self, out, parents, backward_fn):
        self.records.append((out, parents, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


def active_graph() -> Graph:
    return _tls().graph


def reset_graph() -> None:
    """Drop all recorded operations on this thread's graph."""
    active_graph().clear()


class no_grad:
    """Context manager that disables recording (and thus gradient flow)."""

    def __enter__(self):
        tls = _tls()
        self._prev = tls.grad_enabled
        tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _tls().grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    """Attach out to the tape when recording is on and a parent needs grad."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        active_graph().append(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every requires_grad node.

    Repeated calls without zero_grad add up; nodes the loss cannot reach keep
    whatever their .grad already held (zero after construction or zero_grad).
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones(())}
    touched: dict[int, Tensor] = {id(loss): loss}
    for out, parents, backward_fn in reversed(active_graph().records):
        out_adj = adjoints.get(id(out))
        if out_adj is None:
            continue
        for parent, parent_adj in zip(parents, backward_fn(out_adj)):
            if parent_adj is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + parent_adj
            else:
                adjoints[key] = parent_adj
                touched[key] = parent
    for key, node in touched.items():
        if node.requires_grad and node.grad is not None:
            node.grad += adjoints[key]


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# core binary/unary operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {tuple(a.shape)} x {tuple(b.shape)}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), back)


def _broadcast_kind(a_shape, b_shape):
    if a_shape == b_shape:
        return "same"
    if b_shape == ():
        return "scalar"
    if len(a_shape) == 2 and b_shape == (a_shape[1],):
        return "row"
    raise ShapeError(f"cannot broadcast {b_shape} onto {a_shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def back(g):
        return g, _reduce_to(g, kind)

    return _record(out, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, _reduce_to(g * ad, kind)

    return _record(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def back(g):
        return (g * c,)

    return _record(out, (a,), back)


def shift(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data + float(c))

    def back(g):
        return (g,)

    return _record(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(y)

    def back(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def back(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form gelu: 0.5x(1 + tanh(c(x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), back)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of a 2-D tensor to zero mean and unit variance."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-D input, got {tuple(a.shape)}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat)

    def back(g):
        m1 = g.mean(axis=1, keepdims=True)
        m2 = (g * xhat).mean(axis=1, keepdims=True)
        return ((g - m1 - xhat * m2) * inv,)

    return _record(out, (a,), back)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-stabilized."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), back)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = as_tensor(logits)
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross entropy shapes {tuple(logits.shape)} vs {idx.shape}")
    n, v = logits.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"target index out of range for vocabulary {v}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(n), idx].mean())
    probs = np.exp(logp)

    def back(g):
        d = probs.copy()
        d[np.arange(n), idx] -= 1.0
        return (d * (float(g) / n),)

    return _record(out, (logits,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy taking raw logits; targets in [0, 1].

    Computed as max(z,0) - z*y + log1p(exp(-|z|)), which never overflows.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"bce shapes {tuple(logits.shape)} vs {y.shape}")
    z = logits.data
    n = max(logits.size, 1)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(per.sum() / n))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                   np.exp(z) / (1.0 + np.exp(z)))

    def back(g):
        return ((sig - y) * (float(g) / n),)

    return _record(out, (logits,), back)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared elementwise difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred.data - target.data
    n = max(pred.size, 1)
    out = Tensor(np.asarray((diff * diff).sum() / n))

    def back(g):
        d = diff * (2.0 * float(g) / n)
        return d, -d

    return _record(out, (pred, target), back)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()))
    shp = a.data.shape

    def back(g):
        return (np.full(shp, float(g)),)

    return _record(out, (a,), back)


def mean_pool(a: Tensor) -> Tensor:
    """Mean over the row axis of an (L, D) tensor -> (D,)."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"mean_pool expects non-empty 2-D input, got {tuple(a.shape)}")
    rows = a.shape[0]
    out = Tensor(a.data.mean(axis=0))

    def back(g):
        return (np.repeat(g[None, :] / rows, rows, axis=0),)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# shape surgery


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D input, got {tuple(a.shape)}")
    out = Tensor(a.data.T.copy())

    def back(g):
        return (g.T.copy(),)

    return _record(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape).copy())
    old = a.data.shape

    def back(g):
        return (g.reshape(old),)

    return _record(out, (a,), back)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def back(g):
        grads, at = [], 0
        for size in sizes:
            grads.append(g[at:at + size])
            at += size
        return grads

    return _record(out, tuple(parts), back)


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]

    def back(g):
        grads, at = [], 0
        for size in sizes:
            grads.append(g[:, at:at + size])
            at += size
        return grads

    return _record(out, tuple(parts), back)


def narrow_rows(a: Tensor, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    if start < 0 or start + length > a.shape[0]:
        raise ShapeError(f"row slice [{start}:{start + length}] outside {tuple(a.shape)}")
    out = Tensor(a.data[start:start + length].copy())
    shp = a.data.shape

    def back(g):
        full = np.zeros(shp)
        full[start:start + length] = g
        return (full,)

    return _record(out, (a,), back)


def narrow_cols(a: Tensor, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    if start < 0 or start + length > a.shape[1]:
        raise ShapeError(f"column slice [{start}:{start + length}] outside {tuple(a.shape)}")
    out = Tensor(a.data[:, start:start + length].copy())
    shp = a.data.shape

    def back(g):
        full = np.zeros(shp)
        full[:, start:start + length] = g
        return (full,)

    return _record(out, (a,), back)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows by integer index; backward scatter-adds (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows needs a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {tuple(a.shape)}")
    out = Tensor(a.data[idx].copy())
    shp = a.data.shape

    def back(g):
        full = np.zeros(shp)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# symmetric eigensolver (not differentiable, not recorded)


def sym_eig(a):
    """Eigendecomposition of a symmetric matrix (ascending eigenvalues).

    Accepts a Tensor or array; returns plain (values, vectors) arrays.
    """
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"sym_eig needs a square matrix, got {arr.shape}")
    if arr.shape[0] > 64:
        raise ContractError(f"sym_eig supports N <= 64, got N={arr.shape[0]}")
    if arr.size and float(np.abs(arr - arr.T).max()) > 1e-9:
        raise ContractError("sym_eig input is not symmetric within 1e-9")
    sym = 0.5 * (arr + arr.T)
    return accel.jacobi_eigh(sym)
