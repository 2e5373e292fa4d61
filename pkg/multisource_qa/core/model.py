"""
End-to-end multi-source answer generator.

Question, context and image are encoded separately, the image and context
embeddings are fused per token under question guidance, and a causal decoder
cross-attends to the fused sequence to produce the answer tokens.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from multisource_qa.core.blocks import BlockConfig, DecoderBlock, ForwardContext, causal_mask
from multisource_qa.core.encoders import (
    BOS_ID, EOS_ID, PAD_ID, ImageEncoder, SourceEmbeddings, TextEncoder, pad_ids, tile_to_k,
)
from multisource_qa.core.fusion import (
    AlignmentProjections, FusionMode, QuestionGuidedAttention, SourceWeights, Stream,
    alignment_loss, fixed_weights, fuse, project_for_alignment, qga_weights,
)
from multisource_qa.core.module import Module, init_normal, init_ones, init_zeros
from multisource_qa.core.moe import MoEConfig, apply_placement, mean_aux_loss, moe_layers, set_train_mode
from multisource_qa.core.tensor import Tensor, as_tensor, cross_entropy, layer_norm, no_grad

logger = logging.getLogger("multisource_qa.core.model")


@dataclass
class ModelOptions:
    """Architecture switches beyond the block dimensions."""
    fusion_mode: str = "softmax"
    alignment: bool = True
    single_encoder: bool = False
    max_answer_len: int = 3
    image_channels: int = 3
    image_size: int = 16
    patch_size: int = 4

    def validate(self):
        FusionMode(self.fusion_mode)
        if self.max_answer_len < 1:
            raise ValueError(f"max_answer_len must be >= 1, got {self.max_answer_len}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.single_encoder and FusionMode(self.fusion_mode) is not FusionMode.FIXED:
            raise ValueError("single_encoder mode requires fusion_mode 'fixed'")
        return self

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.image_channels * self.patch_size ** 2

    @property
    def decoder_length(self):
        return self.max_answer_len + 1


@dataclass
class Batch:
    """Collated samples; every array has a leading batch axis."""
    question: np.ndarray
    context: np.ndarray
    images: np.ndarray
    decoder_input: np.ndarray
    targets: np.ndarray
    attribute_ids: np.ndarray
    source_labels: List[str]
    answers: List[List[int]]
    ids: List[int]

    @property
    def size(self):
        return self.question.shape[0]


@dataclass
class LossBreakdown:
    dec: Tensor
    qca: Tensor
    qia: Tensor
    aux: Tensor
    weight: float
    total: Tensor

    def as_floats(self):
        return {
            "dec": self.dec.item(),
            "qca": self.qca.item(),
            "qia": self.qia.item(),
            "aux": self.aux.item(),
            "lambda": self.weight,
            "total": self.total.item(),
        }


@dataclass
class ForwardOutput:
    logits: Tensor
    losses: LossBreakdown
    routing: Dict[str, object]
    weights: SourceWeights


@dataclass
class Generation:
    tokens: List[int]
    confidence: float
    alpha_mean: float = 0.5


def collate(samples, k, max_answer_len):
    """Stack samples into a Batch; decoder input is BOS-shifted, targets end with EOS."""
    if not samples:
        raise ValueError("cannot collate an empty list of samples")
    length = max_answer_len + 1
    dec_in, targets = [], []
    for s in samples:
        answer = [int(t) for t in s.answer_ids]
        if len(answer) > max_answer_len:
            raise ValueError(f"sample {s.id}: answer of {len(answer)} tokens exceeds max_answer_len={max_answer_len}")
        dec_in.append(pad_ids([BOS_ID] + answer, length))
        targets.append(pad_ids(answer + [EOS_ID], length))
    return Batch(
        question=np.array([pad_ids(s.question_ids, k) for s in samples], dtype=np.int64),
        context=np.array([pad_ids(s.context_ids, k) for s in samples], dtype=np.int64),
        images=np.stack([s.image.pixels for s in samples]),
        decoder_input=np.array(dec_in, dtype=np.int64),
        targets=np.array(targets, dtype=np.int64),
        attribute_ids=np.array([s.attribute_id for s in samples], dtype=np.int64),
        source_labels=[s.source_label for s in samples],
        answers=[[int(t) for t in s.answer_ids] for s in samples],
        ids=[int(s.id) for s in samples],
    )


def joint_loss(dec, qca, qia, aux, weight):
    """dec + qca + qia + weight * aux."""
    return as_tensor(dec) + as_tensor(qca) + as_tensor(qia) + as_tensor(aux) * float(weight)


class SourceEncoders(Module):
    def __init__(self, cfg, options, rng):
        super().__init__()
        if not options.single_encoder:
            self.question = TextEncoder(cfg, rng)
        self.context = TextEncoder(cfg, rng)
        self.image = ImageEncoder(cfg, options.patch_dim, options.n_patches, rng)


class Decoder(Module):
    """Token + position embedding, causal decoder blocks, vocabulary projection."""

    def __init__(self, cfg, length, rng):
        super().__init__()
        self.n_layers = cfg.n_dec_layers
        self.embed = init_normal(rng, (cfg.vocab_size, cfg.d_model), 1.0 / math.sqrt(cfg.d_model))
        self.pos = init_normal(rng, (length, cfg.d_model), 0.1)
        for i in range(cfg.n_dec_layers):
            setattr(self, f"block{i}", DecoderBlock(cfg, rng))
        self.final_norm = init_ones((cfg.d_model,))
        self.out_proj = init_normal(rng, (cfg.d_model, cfg.vocab_size), 1.0 / math.sqrt(cfg.d_model))
        self.out_bias = init_zeros((cfg.vocab_size,))

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.n_layers)]

    def __call__(self, tokens, memory, ctx=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        length = tokens.shape[1]
        if length > self.pos.shape[0]:
            raise ValueError(f"decoder input of length {length} exceeds {self.pos.shape[0]} positions")
        x = self.embed[tokens] + self.pos[:length]
        mask = causal_mask(length)
        for block in self.blocks:
            x = block(x, memory, mask, None, ctx)
        return layer_norm(x, self.final_norm) @ self.out_proj + self.out_bias


class Model(Module):
    """
    Parameter groups live under ``encoder.question``, ``encoder.context``,
    ``encoder.image``, ``qga``, ``align`` and ``decoder``. The QGA head is
    absent in fixed fusion mode, the alignment projections when alignment is
    off, and the question encoder in single-encoder mode.
    """

    def __init__(self, cfg=None, options=None, moe=None, seed=0):
        super().__init__()
        self.cfg = (cfg or BlockConfig()).validate()
        self.options = (options or ModelOptions()).validate()
        self.moe_config = (moe or MoEConfig()).validate()
        self.seed = seed
        if self.options.n_patches > self.cfg.k:
            raise ValueError(f"{self.options.n_patches} image patches do not fit in k={self.cfg.k}")

        rng = np.random.default_rng(seed)
        self.fusion_mode = FusionMode(self.options.fusion_mode)
        self.encoder = SourceEncoders(self.cfg, self.options, rng)
        if self.fusion_mode is not FusionMode.FIXED:
            self.qga = QuestionGuidedAttention(self.cfg.d_model, rng, self.fusion_mode)
        if self.options.alignment:
            self.align = AlignmentProjections(self.cfg.d_model, rng)
        self.decoder = Decoder(self.cfg, self.options.decoder_length, rng)
        self.assign_names()

        if self.moe_config.enabled:
            self.enable_moe(self.moe_config, rng)

    def enable_moe(self, moe, rng=None):
        """Convert the configured FFN sublayers and apply the train mode."""
        if rng is None:
            rng = np.random.default_rng([self.seed, 1])
        self.moe_config = moe
        placement = moe.placement()
        apply_placement(self, placement, moe, rng)
        set_train_mode(self, placement.train_mode)
        return self

    @classmethod
    def from_backbone(cls, backbone, moe, seed=None):
        """A copy of a dense model with experts cloned from its FFNs."""
        if moe_layers(backbone):
            raise ValueError("backbone already contains MoE layers")
        seed = backbone.seed if seed is None else seed
        model = cls(backbone.cfg, backbone.options, MoEConfig(**{**asdict(moe), "enabled": False}), seed)
        model.load_state_dict(backbone.state_dict())
        return model.enable_moe(moe, np.random.default_rng([seed, 1]))

    def block_stacks(self, site):
        if site == "decoder":
            return [("decoder", self.decoder)]
        stacks = []
        for name in ("question", "context", "image"):
            if hasattr(self.encoder, name):
                stacks.append((f"encoder.{name}", getattr(self.encoder, name)))
        return stacks

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        own = {p.name: p for p in self.parameters()}
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            data = np.asarray(state[name], dtype=np.float64)
            if data.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {data.shape}")
            p.data = data.copy()
        return self

    def config_dict(self):
        return {"model": asdict(self.cfg), "options": asdict(self.options), "moe": asdict(self.moe_config)}

    # ------------------------------------------------------------------ #
    # Forward
    # ------------------------------------------------------------------ #
    def _joint_tokens(self, question, context):
        rows = []
        for q, c in zip(question, context):
            rows.append(pad_ids(list(q[q != PAD_ID]) + list(c[c != PAD_ID]), self.cfg.k))
        return np.array(rows, dtype=np.int64)

    def encode(self, batch, ctx=None):
        """Encode the three sources of a batch; context PAD rows are zeroed."""
        k = self.cfg.k
        if self.options.single_encoder:
            joint = self._joint_tokens(batch.question, batch.context)
            context = self.encoder.context(joint, ctx)
            question = context
            question_mask = context_mask = joint != PAD_ID
        else:
            question = self.encoder.question(batch.question, ctx)
            context = self.encoder.context(batch.context, ctx)
            question_mask = batch.question != PAD_ID
            context_mask = batch.context != PAD_ID
        raw = self.encoder.image(batch.images, self.options.patch_size, ctx)
        context = context * context_mask[..., None].astype(np.float64)
        return SourceEmbeddings(
            question=question,
            context=context,
            image=tile_to_k(raw, k),
            raw_patches=raw,
            question_mask=question_mask,
            context_mask=context_mask,
        )

    def source_weights(self, question):
        if self.fusion_mode is FusionMode.FIXED:
            return fixed_weights(question.shape[:-1])
        return qga_weights(question, self.qga)

    def alignment_losses(self, src):
        if not self.options.alignment:
            return Tensor(0.0), Tensor(0.0)
        q_p = project_for_alignment(src.question, Stream.QUESTION, self.align)
        c_p = project_for_alignment(src.context, Stream.CONTEXT, self.align)
        i_p = project_for_alignment(src.image, Stream.IMAGE, self.align)
        return alignment_loss(q_p, c_p).mean(), alignment_loss(q_p, i_p).mean()

    def forward(self, batch, ctx=None):
        """Teacher-forced pass returning logits [B, T, V] and every loss term."""
        ctx = ctx or ForwardContext()
        src = self.encode(batch, ctx)
        weights = self.source_weights(src.question)
        fused = fuse(src.image, src.context, weights)
        logits = self.decoder(batch.decoder_input, fused.e, ctx)

        b, t, v = logits.shape
        dec = cross_entropy(logits.reshape(b * t, v), batch.targets.reshape(-1), PAD_ID)
        qca, qia = self.alignment_losses(src)
        aux = mean_aux_loss(ctx.routing)
        weight = self.moe_config.aux_weight if ctx.routing else 0.0
        total = joint_loss(dec, qca, qia, aux, weight)
        losses = LossBreakdown(dec=dec, qca=qca, qia=qia, aux=aux, weight=weight, total=total)
        return ForwardOutput(logits=logits, losses=losses, routing=ctx.routing, weights=weights)

    __call__ = forward

    # ------------------------------------------------------------------ #
    # Generation
    # ------------------------------------------------------------------ #
    def generate(self, batch, max_len=None):
        """
        Greedy decoding from BOS for every sample of ``batch``.

        Confidence is the geometric mean of the chosen-token probabilities,
        EOS included when it is produced.
        """
        max_len = self.options.max_answer_len if max_len is None else max_len
        if max_len + 1 > self.options.decoder_length:
            raise ValueError(f"max_len {max_len} exceeds the decoder's {self.options.max_answer_len}")
        ctx = ForwardContext(training=False)
        with no_grad():
            src = self.encode(batch, ctx)
            weights = self.source_weights(src.question)
            memory = fuse(src.image, src.context, weights).e

            b = batch.size
            prefix = np.full((b, 1), BOS_ID, dtype=np.int64)
            log_probs = np.zeros(b)
            n_scored = np.zeros(b, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            answers = [[] for _ in range(b)]
            for step in range(max_len + 1):
                logits = self.decoder(prefix, memory, ctx).data[:, -1, :]
                shifted = logits - logits.max(axis=1, keepdims=True)
                log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
                choice = np.argmax(log_p, axis=1)
                for i in np.nonzero(~done)[0]:
                    if choice[i] == EOS_ID:
                        done[i] = True
                    elif step == max_len:
                        # answer already at max_len tokens; cut without scoring
                        done[i] = True
                        continue
                    else:
                        answers[i].append(int(choice[i]))
                    log_probs[i] += log_p[i, choice[i]]
                    n_scored[i] += 1
                if done.all():
                    break
                prefix = np.concatenate([prefix, choice[:, None]], axis=1)

        alpha_mean = weights.alpha.data.mean(axis=-1)
        return [
            Generation(tokens=answers[i], confidence=float(np.exp(log_probs[i] / max(n_scored[i], 1))),
                       alpha_mean=float(alpha_mean[i]))
            for i in range(b)
        ]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]


def build_model(cfg: Optional[BlockConfig] = None, options: Optional[ModelOptions] = None,
                moe: Optional[MoEConfig] = None, seed: int = 0):
    model = Model(cfg, options, moe, seed)
    logger.debug(f"Built model with {model.parameter_count()} parameter values "
                 f"({len(moe_layers(model))} MoE layer(s))")
    return model


def generate(model, batch, max_len=None):
    return model.generate(batch, max_len)

