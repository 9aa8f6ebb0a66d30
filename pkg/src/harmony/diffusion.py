"""Pixel-space DDPM decoder driven by the LM's condition vectors.

The network predicts the noise added by the forward process (epsilon
prediction). Images are square, values in [0, 1]; conditioning enters
through cross-attention from the patch stream to the projected condition
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Affine, Linear, Mlp, Module, MultiHeadAttention, norm, prefixed


@dataclass
class DiffusionSchedule:
    """Linear beta schedule with cached running products."""

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def q_sample(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Noised state at step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
        if not 1 <= t <= self.steps:
            raise IndexError(f"step {t} outside 1..{self.steps}")
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x0.shape != eps.shape:
            raise ShapeError(f"noise shape {eps.shape} does not match image {x0.shape}")
        ab = self.alpha_bars[t - 1]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def make_schedule(steps: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    if steps < 2:
        raise ConfigError(f"need at least 2 steps, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, steps)
    alphas = 1.0 - betas
    return DiffusionSchedule(steps, betas, alphas, np.cumprod(alphas))


def q_sample(schedule: DiffusionSchedule, x0, t, eps):
    return schedule.q_sample(x0, t, eps)


def sinusoidal_time_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = float(t) * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb


class DenoiseBlock(Module):
    """Self-attention, cross-attention to the conditions, then feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = Mlp(dim, rng)
        self.norm1 = Affine(dim)
        self.norm2 = Affine(dim)
        self.norm3 = Affine(dim)

    def forward(self, x: T.Tensor, cond: T.Tensor) -> T.Tensor:
        x = T.add(x, self.self_attn(norm(x, self.norm1)))
        x = T.add(x, self.cross_attn(norm(x, self.norm2), cond))
        return T.add(x, self.mlp(norm(x, self.norm3)))

    def named_params(self):
        yield from prefixed("self_attn", self.self_attn)
        yield from prefixed("cross_attn", self.cross_attn)
        yield from prefixed("mlp", self.mlp)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("norm2", self.norm2)
        yield from prefixed("norm3", self.norm3)


def _patch_permutation(grid: int, patch: int, channels: int) -> np.ndarray:
    """Flat index map: image position -> position in the patch-major layout."""
    side = grid // patch
    flat = np.arange(grid * grid * channels).reshape(grid, grid, channels)
    tiles = flat.reshape(side, patch, side, patch, channels)
    patch_major = tiles.transpose(0, 2, 1, 3, 4).reshape(-1)
    inverse = np.empty_like(patch_major)
    inverse[patch_major] = np.arange(patch_major.size)
    return inverse


class DenoiseNet(Module):
    """Patch-token transformer predicting epsilon from (x_t, t, conditions)."""

    def __init__(self, grid: int, channels: int, patch: int, dim: int, heads: int,
                 blocks: int, cond_dim: int, rng: np.random.Generator):
        if grid % patch != 0:
            raise ConfigError(f"patch {patch} must divide grid {grid}")
        self.grid = grid
        self.channels = channels
        self.patch = patch
        self.dim = dim
        side = grid // patch
        self.n_tokens = side * side
        self.embed = Linear(patch * patch * channels, dim, rng)
        self.pos = T.Tensor(rng.normal(0.0, 0.02, size=(self.n_tokens, dim)),
                            requires_grad=True)
        self.cond_proj = Linear(cond_dim, dim, rng)
        self.blocks = [DenoiseBlock(dim, heads, rng) for _ in range(blocks)]
        self.final_norm = Affine(dim)
        self.out = Linear(dim, patch * patch * channels, rng)
        self._unpatch = _patch_permutation(grid, patch, channels)

    def _patchify(self, img: np.ndarray) -> np.ndarray:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.shape != (self.grid, self.grid, self.channels):
            raise ShapeError(f"expected {(self.grid, self.grid, self.channels)} image, "
                             f"got {arr.shape}")
        side = self.grid // self.patch
        tiles = arr.reshape(side, self.patch, side, self.patch, self.channels)
        return tiles.transpose(0, 2, 1, 3, 4).reshape(self.n_tokens, -1)

    def forward(self, x_t: np.ndarray, t: int, cond: T.Tensor) -> T.Tensor:
        tokens = T.Tensor(self._patchify(x_t))
        time_emb = sinusoidal_time_embedding(t, self.dim)
        x = T.add(T.add(self.embed(tokens), self.pos), T.Tensor(time_emb))
        ctx = self.cond_proj(cond)
        for block in self.blocks:
            x = block(x, ctx)
        flat = T.reshape(self.out(norm(x, self.final_norm)), (-1, 1))
        image_flat = T.take_rows(flat, self._unpatch)
        shape = (self.grid, self.grid) if self.channels == 1 else \
            (self.grid, self.grid, self.channels)
        return T.reshape(image_flat, shape)

    def __call__(self, x_t, t, cond):
        return self.forward(x_t, t, cond)

    def named_params(self):
        yield from prefixed("embed", self.embed)
        yield "pos", self.pos
        yield from prefixed("cond_proj", self.cond_proj)
        for i, block in enumerate(self.blocks):
            yield from prefixed(f"block{i}", block)
        yield from prefixed("final_norm", self.final_norm)
        yield from prefixed("out", self.out)


class DiffusionHead(Module):
    """Schedule plus denoising network; owns the training loss and the sampler."""

    def __init__(self, grid: int, channels: int, patch: int, dim: int, heads: int,
                 blocks: int, cond_dim: int, steps: int, beta_min: float,
                 beta_max: float, rng: np.random.Generator,
                 stop_cond_grad: bool = False):
        self.schedule = make_schedule(steps, beta_min, beta_max)
        self.net = DenoiseNet(grid, channels, patch, dim, heads, blocks, cond_dim, rng)
        self.stop_cond_grad = stop_cond_grad
        self.net_evals = 0

    def q_sample(self, x0, t, eps):
        return self.schedule.q_sample(x0, t, eps)

    def denoise_loss(self, x0: np.ndarray, cond: T.Tensor,
                     rng: np.random.Generator, t: int | None = None,
                     eps: np.ndarray | None = None) -> T.Tensor:
        """Noise-prediction MSE at one random (t, eps) draw.

        Passing t/eps pins the draw (deterministic replay and oracle tests).
        Gradients flow into the network and, unless stop_cond_grad is set,
        through cond back into the language model.
        """
        x0 = np.asarray(x0, dtype=np.float64)
        if t is None:
            t = int(rng.integers(1, self.schedule.steps + 1))
        if eps is None:
            eps = rng.standard_normal(x0.shape)
        x_t = self.schedule.q_sample(x0, t, eps)
        if self.stop_cond_grad:
            cond = cond.detach()
        self.net_evals += 1
        pred = self.net(x_t, t, cond)
        return T.mse(pred, T.Tensor(eps))

    def sample(self, cond: T.Tensor, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling from pure noise; output clamped to [0, 1]."""
        sched = self.schedule
        shape = (self.net.grid, self.net.grid) if self.net.channels == 1 else \
            (self.net.grid, self.net.grid, self.net.channels)
        with T.no_grad():
            if self.stop_cond_grad:
                cond = cond.detach()
            x = rng.standard_normal(shape)
            for t in range(sched.steps, 0, -1):
                self.net_evals += 1
                eps_hat = self.net(x, t, cond).data
                beta = sched.betas[t - 1]
                alpha = sched.alphas[t - 1]
                ab = sched.alpha_bars[t - 1]
                mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
                if t > 1:
                    ab_prev = sched.alpha_bars[t - 2]
                    var = beta * (1.0 - ab_prev) / (1.0 - ab)
                    x = mean + np.sqrt(var) * rng.standard_normal(shape)
                else:
                    x = mean
        return np.clip(x, 0.0, 1.0)

    def named_params(self):
        yield from prefixed("net", self.net)


def denoise_loss(head: DiffusionHead, x0, cond, rng, t=None, eps=None) -> T.Tensor:
    return head.denoise_loss(x0, cond, rng, t=t, eps=eps)


def sample(head: DiffusionHead, cond, rng) -> np.ndarray:
    return head.sample(cond, rng)
