"""Low-rank adapters over frozen linear maps, routed and unrouted.

A routed layer carries three equal-size groups of rank-r experts: one for
text generation, one for image generation, one shared. A tiny gating network
pools the layer input and emits a scalar route weight gamma; gamma >= 0.5
selects the text group, otherwise the image group, and the shared group
always contributes. The output is base(x) + (selected + shared) / 2, where a
group's delta is the mean over its experts.

Routing is a hard branch, so the gate receives no gradient from the task
loss; it is trained by an auxiliary binary cross-entropy on its logit (the
trainer owns that term). The gate reads a detached copy of x, keeping the
auxiliary gradient out of the backbone.

The unrouted variant (``DenseLoraLayer``) is the control recipe: one delta
on the same sites, updated by every batch regardless of modality. Training
arms that do not route still adapt the frozen backbone through it, so the
routed/unrouted comparison isolates routing rather than the presence of
adapters.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .layers import Linear, Module, prefixed


class LoraExpert(Module):
    """Rank-r delta: scaling * x @ A.T @ B.T, with B zero at init."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator):
        if rank < 1 or rank >= min(d_in, d_out):
            raise ConfigError(f"rank must satisfy 1 <= r < min({d_in}, {d_out})")
        self.rank = rank
        self.scaling = float(alpha) / rank
        self.a = T.Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)), requires_grad=True)
        self.b = T.Tensor(np.zeros((d_out, rank)), requires_grad=True)

    def delta(self, x: T.Tensor) -> T.Tensor:
        if x.shape[-1] != self.a.shape[1]:
            raise ShapeError(f"expert expects {self.a.shape[1]} columns, got {tuple(x.shape)}")
        return T.scale(T.matmul(T.matmul(x, T.transpose(self.a)), T.transpose(self.b)),
                       self.scaling)

    def forward(self, x):
        return self.delta(x)

    def named_params(self):
        yield "a", self.a
        yield "b", self.b


def expert_delta(expert: LoraExpert, x: T.Tensor) -> T.Tensor:
    return expert.delta(x)


class GatingNetwork(Module):
    """Two linear maps over the mean-pooled sequence; sigmoid output in [0, 1].

    The second map is zero-initialized so a fresh gate routes every input to
    exactly 0.5.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng, zero_init=True)

    def route_logit(self, x: T.Tensor) -> T.Tensor:
        if x.data.ndim != 2 or x.shape[0] < 1:
            raise ContractError(f"gate needs a non-empty (L, D) input, got {tuple(x.shape)}")
        pooled = T.reshape(T.mean_pool(x), (1, self.dim))
        return self.fc2(T.gelu(self.fc1(pooled)))

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.sigmoid(self.route_logit(x))

    def named_params(self):
        yield from prefixed("fc1", self.fc1)
        yield from prefixed("fc2", self.fc2)


def gate(network: GatingNetwork, x: T.Tensor) -> T.Tensor:
    return network(x)


class SlideLoraLayer(Module):
    """Drop-in replacement for a Linear with routed expert deltas on top.

    The wrapped base is frozen for good. ``route_lock`` pins gamma to a fixed
    value (used while decoding, where the route is chosen once from the
    prompt); ``last_logit`` and ``last_gamma`` expose the most recent gate
    evaluation for the trainer's auxiliary loss and for routing diagnostics.
    """

    def __init__(self, base: Linear, n: int, s: int, rank: int, alpha: float,
                 gate_hidden: int, rng: np.random.Generator):
        if n % 3 != 0:
            raise ConfigError(f"expert count n={n} must be divisible by 3")
        if n != 3 * s:
            raise ConfigError(f"need n == 3*s, got n={n}, s={s}")
        self.base = base
        self.d_in = base.d_in
        self.d_out = base.d_out
        self.s = s
        for p in base.params():
            p.requires_grad = False
            p.grad = None

        def group():
            return [LoraExpert(base.d_in, base.d_out, rank, alpha, rng) for _ in range(s)]

        self.experts_text = group()
        self.experts_image = group()
        self.experts_shared = group()
        self.gate = GatingNetwork(base.d_in, gate_hidden, rng)
        self.route_lock = None
        self.last_logit = None
        self.last_gamma = None

    def _group_delta(self, experts, x):
        total = experts[0].delta(x)
        for e in experts[1:]:
            total = T.add(total, e.delta(x))
        return T.scale(total, 1.0 / len(experts))

    def forward(self, x: T.Tensor) -> T.Tensor:
        out = self.base(x)
        if self.route_lock is not None:
            gamma = float(self.route_lock)
            self.last_gamma = gamma
        else:
            self.last_logit = self.gate.route_logit(x.detach())
            gamma = float(T.sigmoid(self.last_logit).data[0, 0])
            self.last_gamma = gamma
        selected = self.experts_text if gamma >= 0.5 else self.experts_image
        routed = T.add(self._group_delta(selected, x),
                       self._group_delta(self.experts_shared, x))
        return T.add(out, T.scale(routed, 0.5))

    def named_params(self):
        yield from prefixed("base", self.base)
        yield from self.adapter_named_params()

    def adapter_named_params(self):
        """Everything attach() added: experts and gate, not the base."""
        for label, group in (("text", self.experts_text),
                             ("image", self.experts_image),
                             ("shared", self.experts_shared)):
            for i, e in enumerate(group):
                yield from prefixed(f"{label}.{i}", e)
        yield from prefixed("gate", self.gate)


def slide_lora_forward(layer: SlideLoraLayer, x: T.Tensor) -> T.Tensor:
    return layer(x)


class DenseLoraLayer(Module):
    """Drop-in Linear replacement with a single unrouted rank-r delta.

    Same frozen base, same zero-init transparency as the routed layer, no
    gate: every batch updates the one delta.
    """

    def __init__(self, base: Linear, rank: int, alpha: float,
                 rng: np.random.Generator):
        self.base = base
        self.d_in = base.d_in
        self.d_out = base.d_out
        for p in base.params():
            p.requires_grad = False
            p.grad = None
        self.delta = LoraExpert(base.d_in, base.d_out, rank, alpha, rng)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.add(self.base(x), self.delta.delta(x))

    def named_params(self):
        yield from prefixed("base", self.base)
        yield from self.adapter_named_params()

    def adapter_named_params(self):
        yield from prefixed("delta", self.delta)


@contextmanager
def routing_locked(layers):
    """Pin each layer's route to its most recent gamma for the duration."""
    saved = []
    for layer in layers:
        if layer.last_gamma is None:
            raise ContractError("cannot lock routing before any forward pass")
        saved.append(layer.route_lock)
        layer.route_lock = layer.last_gamma
    try:
        yield
    finally:
        for layer, prev in zip(layers, saved):
            layer.route_lock = prev


class AdapterRegistry:
    """Which layers an attach call created, plus their added parameters."""

    def __init__(self):
        self.layers = []  # (site name, adapter layer)

    def add(self, name: str, layer):
        self.layers.append((name, layer))

    def named_params(self):
        for name, layer in self.layers:
            for sub, p in layer.adapter_named_params():
                yield f"{name}.{sub}", p

    def base_param_ids(self):
        return {id(p) for _, layer in self.layers for p in layer.base.params()}

    def __iter__(self):
        return iter(layer for _, layer in self.layers)

    def __len__(self):
        return len(self.layers)


class SlideLoraRegistry(AdapterRegistry):
    def gate_params(self):
        for _, layer in self.layers:
            yield from layer.gate.params()


_PLACEMENTS = ("vision_encoder", "llm", "both")


def attach(model, placement: str, config: dict, rng: np.random.Generator) -> SlideLoraRegistry:
    """Wrap the query/value projections of the chosen component's attention.

    The model must expose ``lora_sites(placement)`` yielding
    (site_name, holder, attribute) triples whose attribute currently holds a
    plain Linear. Returns the registry of added layers; also stored on the
    model as ``slide_registry``.
    """
    if placement not in _PLACEMENTS:
        raise ConfigError(f"placement must be one of {_PLACEMENTS}, got {placement!r}")
    n, s = config["n"], config["s"]
    if n % 3 != 0:
        raise ConfigError(f"expert count n={n} must be divisible by 3")
    registry = SlideLoraRegistry()
    for site, holder, attr in model.lora_sites(placement):
        base = getattr(holder, attr)
        layer = SlideLoraLayer(base, n, s, config["rank"], config["alpha"],
                               config["gate_hidden"], rng)
        setattr(holder, attr, layer)
        registry.add(site, layer)
    if len(registry) == 0:
        raise ConfigError(f"no attachment sites for placement {placement!r}")
    model.slide_registry = registry
    return registry


def attach_dense(model, placement: str, config: dict,
                 rng: np.random.Generator) -> AdapterRegistry:
    """Wrap the same sites as attach() with unrouted single-delta layers.

    Stored on the model as ``dense_registry``; the trainer treats either
    registry's parameters as the adapter set.
    """
    if placement not in _PLACEMENTS:
        raise ConfigError(f"placement must be one of {_PLACEMENTS}, got {placement!r}")
    registry = AdapterRegistry()
    for site, holder, attr in model.lora_sites(placement):
        base = getattr(holder, attr)
        layer = DenseLoraLayer(base, config["rank"], config["alpha"], rng)
        setattr(holder, attr, layer)
        registry.add(site, layer)
    if len(registry) == 0:
        raise ConfigError(f"no attachment sites for placement {placement!r}")
    model.dense_registry = registry
    return registry


def param_overhead(model) -> dict:
    """Added-vs-base parameter counts for an instrumented model."""
    registry = getattr(model, "slide_registry", None)
    if registry is None:
        raise ContractError("model carries no routed-expert layers")
    added_ids = set()
    added = 0
    for _, p in registry.named_params():
        if id(p) not in added_ids:
            added_ids.add(id(p))
            added += p.size
    base = 0
    for _, p in model.named_params():
        if id(p) not in added_ids:
            base += p.size
    return {"added": added, "base": base, "ratio": added / base}


def layer_overhead_closed_form(d_in: int, d_out: int, s: int, rank: int,
                               gate_hidden: int) -> int:
    """3s experts of r(d_in + d_out) each, plus the two gate maps."""
    experts = 3 * s * rank * (d_in + d_out)
    gate_params = d_in * gate_hidden + gate_hidden + gate_hidden + 1
    return experts + gate_params
