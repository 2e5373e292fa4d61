"""
Transformer building blocks: multi-head attention, feed-forward, and the
pre-norm encoder / decoder blocks built from them.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from multisource_qa.core.module import Module, init_normal, init_ones, init_zeros
from multisource_qa.core.tensor import layer_norm

logger = logging.getLogger("multisource_qa.core.blocks")


@dataclass
class BlockConfig:
    """Model dimensions shared by every encoder and the decoder."""
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    k: int = 32
    vocab_size: int = 99

    def validate(self):
        for name in ("d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers", "k", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"BlockConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


@dataclass
class ForwardContext:
    """Per-pass state threaded through every block."""
    training: bool = False
    rng: Optional[np.random.Generator] = None
    routing: Dict[str, object] = field(default_factory=dict)


def causal_mask(length):
    """[T, T] boolean mask, True where key position <= query position."""
    return np.tril(np.ones((length, length), dtype=bool))


def key_padding_mask(valid, n_queries):
    """Expand a [B, k_v] validity mask to [B, n_queries, k_v]."""
    valid = np.asarray(valid, dtype=bool)
    return np.broadcast_to(valid[:, None, :], (valid.shape[0], n_queries, valid.shape[1]))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads, no biases (T5 style)."""

    def __init__(self, d_model, n_heads, rng):
        super().__init__()
        std = 1.0 / math.sqrt(d_model)
        self.n_heads = n_heads
        self.wq = init_normal(rng, (d_model, d_model), std)
        self.wk = init_normal(rng, (d_model, d_model), std)
        self.wv = init_normal(rng, (d_model, d_model), std)
        self.wo = init_normal(rng, (d_model, d_model), std)

    def _split(self, x):
        b, length, d = x.shape
        return x.reshape(b, length, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, q_in, kv_in, mask=None, return_weights=False):
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = q_in.reshape(1, *q_in.shape)
            kv_in = kv_in.reshape(1, *kv_in.shape)
        batch, k_q, d = q_in.shape
        k_v = kv_in.shape[1]
        if kv_in.shape[2] != d or self.wq.shape[0] != d:
            raise ValueError(f"attention width mismatch: queries {q_in.shape}, keys {kv_in.shape}, d_model {self.wq.shape[0]}")

        q = self._split(q_in @ self.wq)
        k = self._split(kv_in @ self.wk)
        v = self._split(kv_in @ self.wv)
        scores = (q @ k.swap_last()) * (1.0 / math.sqrt(d // self.n_heads))

        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 2:
                mask = mask[None]
            mask = np.broadcast_to(mask, (batch, k_q, k_v))
            if np.any(~mask.any(axis=-1)):
                raise ValueError("attention mask leaves a query with no attendable position")
            scores = scores.masked_fill(~mask[:, None, :, :], -np.inf)

        weights = scores.softmax(axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, k_q, d) @ self.wo
        if squeeze:
            out = out.reshape(k_q, d)
        return (out, weights) if return_weights else out


class FeedForward(Module):
    """Two linear maps with a ReLU between; the residual is added by the caller."""

    def __init__(self, d_model, d_ff, rng):
        super().__init__()
        self.w1 = init_normal(rng, (d_model, d_ff), 1.0 / math.sqrt(d_model))
        self.b1 = init_zeros((d_ff,))
        self.w2 = init_normal(rng, (d_ff, d_model), 1.0 / math.sqrt(d_ff))
        self.b2 = init_zeros((d_model,))

    def __call__(self, x, ctx=None):
        return ((x @ self.w1 + self.b1).relu()) @ self.w2 + self.b2


class EncoderBlock(Module):
    """x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.norm1 = init_ones((cfg.d_model,))
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = init_ones((cfg.d_model,))
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, x, mask=None, ctx=None):
        h = layer_norm(x, self.norm1)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(layer_norm(x, self.norm2), ctx)


class DecoderBlock(Module):
    """Causal self-attention, cross-attention over memory, then feed-forward."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.norm1 = init_ones((cfg.d_model,))
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = init_ones((cfg.d_model,))
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm3 = init_ones((cfg.d_model,))
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, x, memory, self_mask=None, cross_mask=None, ctx=None):
        if self_mask is None:
            self_mask = causal_mask(x.shape[-2])
        h = layer_norm(x, self.norm1)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(layer_norm(x, self.norm2), memory, cross_mask)
        return x + self.ffn(layer_norm(x, self.norm3), ctx)

