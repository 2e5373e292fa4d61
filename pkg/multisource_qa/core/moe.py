"""
Sparse mixture-of-experts layers.

A MoELayer replaces the feed-forward sublayer of a transformer block. Each
token is routed to the ``k_top`` experts with the highest (noisy) gate logits;
the selected expert outputs are combined with the renormalized gate weights.
Routing statistics are accumulated per layer for the load-balancing loss.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from multisource_qa.core.blocks import FeedForward
from multisource_qa.core.module import Module, Parameter
from multisource_qa.core.tensor import Tensor, as_tensor, scatter_rows

logger = logging.getLogger("multisource_qa.core.moe")

GATE_INIT_STD = 0.02
EXPERT_PERTURB_STD = 0.01


class Site(Enum):
    ENCODER = "encoder"
    DECODER = "decoder"
    BOTH = "both"


class LayerSelector(Enum):
    ALL = "all"
    EVEN = "even"
    ODD = "odd"
    LAST = "last"
    LAST2 = "last2"


class TrainMode(Enum):
    FULL = "full"
    EXPERTS_ONLY = "experts_only"
    BACKBONE_ONLY = "backbone_only"


@dataclass
class MoEPlacement:
    site: Site = Site.DECODER
    layers: LayerSelector = LayerSelector.ODD
    train_mode: TrainMode = TrainMode.FULL

    def __post_init__(self):
        self.site = _parse(Site, self.site, "site")
        self.layers = _parse(LayerSelector, self.layers, "layer selector")
        self.train_mode = _parse(TrainMode, self.train_mode, "train mode")

    def label(self):
        return f"{self.site.value}-{self.layers.value}/{self.train_mode.value}"


@dataclass
class MoEConfig:
    """Expert count, gating and placement. ``enabled=False`` keeps every FFN dense."""
    enabled: bool = False
    n_experts: int = 4
    k_top: int = 2
    noise_std: float = 1.0
    site: str = "decoder"
    layers: str = "odd"
    train_mode: str = "full"
    aux_weight: float = 0.1

    def validate(self):
        if self.n_experts < 1:
            raise ValueError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.k_top <= self.n_experts:
            raise ValueError(f"k_top must lie in [1, {self.n_experts}], got {self.k_top}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")
        self.placement()
        return self

    def placement(self):
        return MoEPlacement(self.site, self.layers, self.train_mode)


def _parse(enum_cls, value, what):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ValueError(f"invalid {what} {value!r}; expected one of: {choices}") from None


@dataclass
class RoutingStats:
    """Per-layer accumulators: top-1 counts, summed gate weights, token count."""
    n_experts: int
    top1_counts: np.ndarray = None
    weight_sums: Tensor = None
    token_count: int = 0

    def __post_init__(self):
        if self.top1_counts is None:
            self.top1_counts = np.zeros(self.n_experts, dtype=np.int64)
        self.top1_counts = np.asarray(self.top1_counts, dtype=np.int64)
        if self.weight_sums is None:
            self.weight_sums = np.zeros(self.n_experts)
        self.weight_sums = as_tensor(self.weight_sums)

    def record(self, weights):
        """Add one batch of gate weights [N, n]."""
        top1 = np.argmax(weights.data, axis=1)
        self.top1_counts = self.top1_counts + np.bincount(top1, minlength=self.n_experts)
        self.weight_sums = self.weight_sums + weights.sum(axis=0)
        self.token_count += weights.shape[0]

    @property
    def f(self):
        return self.top1_counts / max(self.token_count, 1)

    @property
    def P(self):
        return self.weight_sums.data / max(self.token_count, 1)

    def merge(self, other):
        """Detached sum of two accumulators, for epoch-level reporting."""
        if other.n_experts != self.n_experts:
            raise ValueError(f"cannot merge routing stats over {self.n_experts} and {other.n_experts} experts")
        return RoutingStats(
            n_experts=self.n_experts,
            top1_counts=self.top1_counts + other.top1_counts,
            weight_sums=self.weight_sums.data + other.weight_sums.data,
            token_count=self.token_count + other.token_count,
        )

    def detached(self):
        return RoutingStats(self.n_experts, self.top1_counts.copy(), self.weight_sums.data.copy(), self.token_count)


class MoELayer(Module):
    """``n_experts`` feed-forward experts behind a linear top-k gate."""

    def __init__(self, d_model, d_ff, cfg, rng, layer_name=""):
        super().__init__()
        self.layer_name = layer_name
        self.n_experts = cfg.n_experts
        self.k_top = cfg.k_top
        self.noise_std = cfg.noise_std
        for i in range(cfg.n_experts):
            setattr(self, f"expert{i}", FeedForward(d_model, d_ff, rng))
        self.gate = Parameter(rng.normal(0.0, GATE_INIT_STD, size=(d_model, cfg.n_experts)))

    @classmethod
    def from_dense(cls, dense, cfg, rng, layer_name=""):
        """Clone a trained dense FFN into every expert, then perturb each copy."""
        d_model, d_ff = dense.w1.shape
        layer = cls(d_model, d_ff, cfg, rng, layer_name)
        for expert in layer.experts:
            for (_, src), (_, dst) in zip(dense.named_parameters(), expert.named_parameters()):
                dst.data = src.data + rng.normal(0.0, EXPERT_PERTURB_STD, size=src.shape)
        return layer

    @property
    def experts(self):
        return [getattr(self, f"expert{i}") for i in range(self.n_experts)]

    def __call__(self, x, ctx=None):
        training = bool(ctx is not None and ctx.training)
        rng = ctx.rng if ctx is not None else None
        stats = None
        if ctx is not None:
            stats = ctx.routing.setdefault(self.layer_name, RoutingStats(self.n_experts))
        return moe_forward(x, self, stats, training, rng)


def _route(flat, layer, training, rng):
    """Gate weights [N, n] as a Tensor and the top-k expert indices [N, k_top]."""
    logits = flat @ layer.gate
    if training and layer.noise_std > 0:
        if rng is None:
            raise ValueError(f"MoE layer {layer.layer_name!r}: noisy gating in training mode needs an rng")
        logits = logits + Tensor(rng.normal(0.0, layer.noise_std, size=logits.shape))
    # stable sort on negated logits: ties go to the lower expert index
    top = np.argsort(-logits.data, axis=1, kind="stable")[:, :layer.k_top]
    dropped = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(dropped, top, False, axis=1)
    weights = logits.masked_fill(dropped, -np.inf).softmax(axis=-1)
    # selected experts keep a positive weight when the top-k softmax underflows
    floor = np.where(dropped, 0.0, np.finfo(np.float64).tiny)
    return weights + Tensor(floor), top


def gate(x, layer, training=False, rng=None):
    """Route a single token vector; returns ``(weights[n], top_set)``."""
    x = as_tensor(x)
    weights, top = _route(x.reshape(1, x.shape[-1]), layer, training, rng)
    return weights.data[0].copy(), [int(i) for i in top[0]]


def moe_forward(x, layer, stats=None, training=False, rng=None):
    """
    Sparse expert mixture over every token of ``x`` [..., d].

    Each expert runs only on the rows routed to it. An expert that receives
    no rows still joins the graph with an empty batch so its parameters get a
    zero gradient.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    n_tokens = flat.shape[0]
    weights, top = _route(flat, layer, training, rng)

    out = None
    for i, expert in enumerate(layer.experts):
        rows = np.nonzero((top == i).any(axis=1))[0]
        y = expert(flat[rows])
        w = weights[rows, i].reshape(len(rows), 1)
        part = scatter_rows(y * w, rows, n_tokens)
        out = part if out is None else out + part

    if stats is not None:
        stats.record(weights)
    return out.reshape(x.shape)


def aux_loss(stats):
    """Load-balancing loss n * sum_i f_i * P_i; differentiable through P only."""
    if stats.token_count < 1:
        raise ValueError("aux_loss needs at least one routed token")
    f = stats.top1_counts / float(stats.token_count)
    P = stats.weight_sums / float(stats.token_count)
    return (P * f).sum() * float(stats.n_experts)


def mean_aux_loss(routing):
    """Average aux_loss over every MoE layer that routed tokens in this pass."""
    losses = [aux_loss(s) for s in routing.values() if s.token_count]
    if not losses:
        return Tensor(0.0)
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total / float(len(losses))


def routing_records(stats_by_layer):
    """Flatten per-layer stats into ``{layer, expert, f, P}`` records."""
    records = []
    for name in sorted(stats_by_layer):
        stats = stats_by_layer[name]
        for i, (f_i, p_i) in enumerate(zip(stats.f, stats.P)):
            records.append({"layer": name, "expert": i, "f": float(f_i), "P": float(p_i)})
    return records


def resolve_layers(selector, n_layers):
    """0-indexed block indices picked by a layer selector."""
    selector = _parse(LayerSelector, selector, "layer selector")
    if n_layers < 1:
        raise ValueError(f"cannot place experts in a stack of {n_layers} blocks")
    indices = range(n_layers)
    if selector is LayerSelector.ALL:
        return list(indices)
    if selector is LayerSelector.EVEN:
        return [i for i in indices if i % 2 == 0]
    if selector is LayerSelector.ODD:
        return [i for i in indices if i % 2 == 1]
    if selector is LayerSelector.LAST:
        return [n_layers - 1]
    return list(indices)[-2:]


def apply_placement(model, placement, cfg, rng):
    """
    Replace the FFN of every selected block with a MoELayer cloned from it.

    ``model.block_stacks(site)`` supplies ``(prefix, stack)`` pairs; each stack
    exposes ``blocks``.
    """
    placement = placement if isinstance(placement, MoEPlacement) else MoEPlacement(**placement)
    sites = ["encoder", "decoder"] if placement.site is Site.BOTH else [placement.site.value]
    converted = []
    for site in sites:
        for prefix, stack in model.block_stacks(site):
            blocks = stack.blocks
            for idx in resolve_layers(placement.layers, len(blocks)):
                block = blocks[idx]
                if isinstance(block.ffn, MoELayer):
                    raise ValueError(f"{prefix}.block{idx}.ffn is already a MoE layer")
                name = f"{prefix}.block{idx}.ffn"
                block.ffn = MoELayer.from_dense(block.ffn, cfg, rng, layer_name=name)
                converted.append(name)
    if not converted:
        raise ValueError(f"placement {placement.label()} selects no blocks")
    model.assign_names()
    logger.debug(f"Converted {len(converted)} FFN sublayer(s) to MoE: {', '.join(converted)}")
    return model


def moe_layers(model):
    """``(path, MoELayer)`` for every converted sublayer, in registration order."""
    return [(path, m) for path, m in model.named_modules() if isinstance(m, MoELayer)]


def set_train_mode(model, mode):
    """Flip ``trainable`` flags for full / experts_only / backbone_only training."""
    mode = _parse(TrainMode, mode, "train mode")
    expert_ids = {id(p) for _, layer in moe_layers(model) for p in layer.parameters()}
    if mode is not TrainMode.FULL and not expert_ids:
        raise ValueError(f"train mode {mode.value} needs MoE layers; none are placed")
    for p in model.parameters():
        if mode is TrainMode.FULL:
            p.trainable = True
        elif mode is TrainMode.EXPERTS_ONLY:
            p.trainable = id(p) in expert_ids
        else:
            p.trainable = id(p) not in expert_ids
    n_trainable = model.parameter_count(trainable_only=True)
    logger.debug(f"Train mode {mode.value}: {n_trainable} trainable parameter value(s)")
    return model


def expert_parameter_names(model):
    return [p.name for _, layer in moe_layers(model) for p in layer.parameters()]
