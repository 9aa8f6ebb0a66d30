"""Small parameter-holding building blocks shared by the model components."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError


class Module:
    """Anything owning parameters; children report them with name prefixes."""

    def named_params(self):
        raise NotImplementedError

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def prefixed(name: str, module: Module):
    for sub, p in module.named_params():
        yield f"{name}.{sub}", p


class Linear(Module):
    """Affine map x @ W.T + b with W of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float = 0.02, bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal(0.0, std, size=(d_out, d_in))
        self.d_in = d_in
        self.d_out = d_out
        self.w = T.Tensor(w, requires_grad=True)
        self.b = T.Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects {self.d_in} columns, got {tuple(x.shape)}")
        out = T.matmul(x, T.transpose(self.w))
        if self.b is not None:
            out = T.add(out, self.b)
        return out

    def named_params(self):
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class Affine(Module):
    """Learned per-feature gain and shift, applied after layer normalization."""

    def __init__(self, dim: int):
        self.g = T.Tensor(np.ones(dim), requires_grad=True)
        self.b = T.Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.mul(x, self.g), self.b)

    def named_params(self):
        yield "g", self.g
        yield "b", self.b


def norm(x: T.Tensor, affine: Affine) -> T.Tensor:
    return affine(T.layer_norm(x))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over 2-D (L, D) streams, head-split by columns.

    With causal=True a strictly-upper-triangular -1e30 additive mask keeps
    every query from seeing later keys. The last softmax weights are kept on
    ``last_attn`` (plain arrays, one per head) for diagnostics.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 causal: bool = False):
        if dim % heads != 0:
            raise ShapeError(f"heads {heads} must divide dim {dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.causal = causal
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_attn = None

    def forward(self, query: T.Tensor, context: T.Tensor | None = None) -> T.Tensor:
        kv = query if context is None else context
        q, k, v = self.wq(query), self.wk(kv), self.wv(kv)
        lq, lk = q.shape[0], k.shape[0]
        mask = None
        if self.causal:
            if lq != lk:
                raise ShapeError("causal attention needs matching query/key lengths")
            mask = np.triu(np.full((lq, lk), -1e30), k=1)
        heads_out = []
        self.last_attn = []
        for h in range(self.heads):
            lo = h * self.head_dim
            qh = T.narrow_cols(q, lo, self.head_dim)
            kh = T.narrow_cols(k, lo, self.head_dim)
            vh = T.narrow_cols(v, lo, self.head_dim)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(self.head_dim))
            if mask is not None:
                scores = T.add(scores, T.Tensor(mask))
            attn = T.softmax(scores)
            self.last_attn.append(attn.data.copy())
            heads_out.append(T.matmul(attn, vh))
        return self.wo(T.concat_cols(heads_out))

    def named_params(self):
        for name in ("wq", "wk", "wv", "wo"):
            yield from prefixed(name, getattr(self, name))


class Mlp(Module):
    """Two-layer gelu feed-forward with 4x expansion."""

    def __init__(self, dim: int, rng: np.random.Generator, expand: int = 4):
        self.fc1 = Linear(dim, expand * dim, rng)
        self.fc2 = Linear(expand * dim, dim, rng)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self):
        yield from prefixed("fc1", self.fc1)
        yield from prefixed("fc2", self.fc2)


class SelfBlock(Module):
    """Pre-norm transformer block: attention then feed-forward, residual both."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 causal: bool = False):
        self.attn = MultiHeadAttention(dim, heads, rng, causal=causal)
        self.mlp = Mlp(dim, rng)
        self.norm1 = Affine(dim)
        self.norm2 = Affine(dim)

    def forward(self, x: T.Tensor) -> T.Tensor:
        x = T.add(x, self.attn(norm(x, self.norm1)))
        return T.add(x, self.mlp(norm(x, self.norm2)))

    def named_params(self):
        yield from prefixed("attn", self.attn)
        yield from prefixed("mlp", self.mlp)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("norm2", self.norm2)


class CrossBlock(Module):
    """Pre-norm block whose attention reads an external context stream."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = Mlp(dim, rng)
        self.norm1 = Affine(dim)
        self.norm2 = Affine(dim)

    def forward(self, x: T.Tensor, context: T.Tensor) -> T.Tensor:
        x = T.add(x, self.attn(norm(x, self.norm1), context))
        return T.add(x, self.mlp(norm(x, self.norm2)))

    def named_params(self):
        yield from prefixed("attn", self.attn)
        yield from prefixed("mlp", self.mlp)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("norm2", self.norm2)


def freeze_params(params) -> None:
    for p in params:
        p.requires_grad = False
        p.grad = None


def unfreeze_params(params, skip_ids=()) -> None:
    for p in params:
        if id(p) in skip_ids:
            continue
        p.requires_grad = True
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
