"""
Question-guided attention over the image and context sources, and the
cosine alignment losses between the question and each source.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from multisource_qa.core.module import Module, init_normal, init_zeros
from multisource_qa.core.tensor import ShapeError, Tensor, as_tensor

logger = logging.getLogger("multisource_qa.core.fusion")

N_SOURCES = 2
IMAGE_COLUMN = 0
CONTEXT_COLUMN = 1
ALIGNMENT_EPS = 1e-8


class FusionMode(Enum):
    """How the per-token source weights are obtained."""
    SOFTMAX = "softmax"  # softmax over the two source logits per token
    LINEAR = "linear"    # raw FC outputs, unnormalized
    FIXED = "fixed"      # alpha = beta = 0.5, no question guidance


class Stream(Enum):
    QUESTION = "question"
    CONTEXT = "context"
    IMAGE = "image"


@dataclass
class SourceWeights:
    alpha: Tensor  # image weight per token, [..., k]
    beta: Tensor   # context weight per token, [..., k]
    raw: Tensor    # [..., k, 2]


@dataclass
class FusedEmbedding:
    e: Tensor


class QuestionGuidedAttention(Module):
    """FC layer mapping each question token to one logit per source."""

    def __init__(self, d_model, rng, mode=FusionMode.SOFTMAX):
        super().__init__()
        self.mode = FusionMode(mode)
        self.weight = init_normal(rng, (d_model, N_SOURCES), 1.0 / math.sqrt(d_model))
        self.bias = init_zeros((N_SOURCES,))

    def __call__(self, question):
        return qga_weights(question, self)


def fixed_weights(token_shape):
    """alpha = beta = 0.5 everywhere; no parameters involved."""
    token_shape = tuple(token_shape)
    half = Tensor(np.full(token_shape, 0.5))
    return SourceWeights(alpha=half, beta=half, raw=Tensor(np.full(token_shape + (N_SOURCES,), 0.5)))


def qga_weights(question, head):
    """Per-token source weights from the question embedding [..., k, d]."""
    question = as_tensor(question)
    if head is None or head.mode is FusionMode.FIXED:
        return fixed_weights(question.shape[:-1])

    raw = question @ head.weight + head.bias
    scores = raw.softmax(axis=-1) if head.mode is FusionMode.SOFTMAX else raw
    return SourceWeights(
        alpha=scores[..., IMAGE_COLUMN],
        beta=scores[..., CONTEXT_COLUMN],
        raw=raw,
    )


def fuse(image, context, weights):
    """e_t = alpha_t * I_t + beta_t * C_t for every token t."""
    image, context = as_tensor(image), as_tensor(context)
    if image.shape != context.shape:
        raise ShapeError(f"cannot fuse image {image.shape} with context {context.shape}")
    if weights.alpha.shape != image.shape[:-1]:
        raise ShapeError(f"source weights {weights.alpha.shape} do not match sources {image.shape}")
    alpha = weights.alpha.reshape(weights.alpha.shape + (1,))
    beta = weights.beta.reshape(weights.beta.shape + (1,))
    return FusedEmbedding(e=alpha * image + beta * context)


class AlignmentProjections(Module):
    """One d -> 1 linear map per stream; parameters are not shared."""

    def __init__(self, d_model, rng):
        super().__init__()
        std = 1.0 / math.sqrt(d_model)
        self.question = init_normal(rng, (d_model, 1), std)
        self.question_bias = init_zeros((1,))
        self.context = init_normal(rng, (d_model, 1), std)
        self.context_bias = init_zeros((1,))
        self.image = init_normal(rng, (d_model, 1), std)
        self.image_bias = init_zeros((1,))

    def __call__(self, x, stream):
        return project_for_alignment(x, Stream(stream), self)


def project_for_alignment(x, stream, projections):
    """[..., k, d] -> [..., k] with the stream's own linear map."""
    stream = Stream(stream)
    weight = getattr(projections, stream.value)
    bias = getattr(projections, f"{stream.value}_bias")
    out = as_tensor(x) @ weight + bias
    return out.reshape(out.shape[:-1])


def alignment_loss(a, b, eps=ALIGNMENT_EPS):
    """|1 - cos(a, b)| along the last axis; a scalar for 1-D inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"alignment_loss shape mismatch: {a.shape} vs {b.shape}")
    dot = (a * b).sum(axis=-1)
    norm_a = (a * a).sum(axis=-1).sqrt()
    norm_b = (b * b).sum(axis=-1).sqrt()
    return (1.0 - dot / (norm_a * norm_b + eps)).abs()
