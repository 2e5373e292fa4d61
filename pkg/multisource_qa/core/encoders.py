"""
Source encoders: question and context text encoders with unshared weights,
and a patch-embedding image encoder whose output is tiled to length k.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from multisource_qa.core.blocks import EncoderBlock, key_padding_mask
from multisource_qa.core.module import Module, init_normal, init_ones, init_zeros
from multisource_qa.core.tensor import Tensor, layer_norm

logger = logging.getLogger("multisource_qa.core.encoders")

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass
class ImageGrid:
    """A channels x height x width float image with values in [0, 1]."""
    pixels: np.ndarray
    patch_size: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ValueError(f"image must be channels x height x width, got shape {self.pixels.shape}")
        _check_patch_size(self.pixels.shape, self.patch_size)
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def n_patches(self):
        _, h, w = self.pixels.shape
        return (h // self.patch_size) * (w // self.patch_size)


@dataclass
class SourceEmbeddings:
    question: Tensor
    context: Tensor
    image: Tensor
    raw_patches: Tensor
    question_mask: np.ndarray
    context_mask: np.ndarray


def pad_ids(ids, length, pad_id=PAD_ID):
    """Truncate or right-pad a token id sequence to exactly ``length``."""
    ids = [int(i) for i in ids][:length]
    return ids + [pad_id] * (length - len(ids))


def _check_patch_size(shape, patch_size):
    h, w = shape[-2], shape[-1]
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide image extents {h}x{w}")


def patchify(images, patch_size):
    """[B, C, H, W] -> [B, k', C*p*p], patches in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    _check_patch_size(images.shape, patch_size)
    b, c, h, w = images.shape
    p = patch_size
    patches = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return patches.reshape(b, (h // p) * (w // p), c * p * p)


def tile_to_k(patches, k):
    """
    Repeat the whole patch sequence until it covers k rows, then truncate.

    Row j of the result is patch row j mod k'.
    """
    n_patches = patches.shape[-2]
    if n_patches < 1:
        raise ValueError("tile_to_k needs at least one patch row")
    index = np.arange(k) % n_patches
    if patches.ndim == 2:
        return patches[index]
    return patches[:, index, :]


class TextEncoder(Module):
    """Token + position embeddings followed by encoder blocks and a final norm."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.n_layers = cfg.n_enc_layers
        self.embed = init_normal(rng, (cfg.vocab_size, cfg.d_model), 1.0 / math.sqrt(cfg.d_model))
        self.pos = init_normal(rng, (cfg.k, cfg.d_model), 0.1)
        for i in range(cfg.n_enc_layers):
            setattr(self, f"block{i}", EncoderBlock(cfg, rng))
        self.final_norm = init_ones((cfg.d_model,))

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.n_layers)]

    def __call__(self, tokens, ctx=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if np.any((tokens < 0) | (tokens >= self.vocab_size)):
            bad = tokens[(tokens < 0) | (tokens >= self.vocab_size)][0]
            raise ValueError(f"token id {bad} is outside the vocabulary of size {self.vocab_size}")
        length = tokens.shape[1]
        if length > self.pos.shape[0]:
            raise ValueError(f"sequence length {length} exceeds k={self.pos.shape[0]}")

        valid = tokens != PAD_ID
        valid[:, 0] |= ~valid.any(axis=1)  # an all-PAD row still attends to position 0
        mask = key_padding_mask(valid, length)
        x = self.embed[tokens] + self.pos[:length]
        for block in self.blocks:
            x = block(x, mask, ctx)
        x = layer_norm(x, self.final_norm)
        if squeeze:
            x = x.reshape(length, x.shape[-1])
        return x


class ImageEncoder(Module):
    """Linear patch embedding + position embedding + encoder blocks."""

    def __init__(self, cfg, patch_dim, n_patches, rng):
        super().__init__()
        self.n_layers = cfg.n_enc_layers
        self.patch_proj = init_normal(rng, (patch_dim, cfg.d_model), 1.0 / math.sqrt(patch_dim))
        self.patch_bias = init_zeros((cfg.d_model,))
        self.pos = init_normal(rng, (n_patches, cfg.d_model), 0.1)
        for i in range(cfg.n_enc_layers):
            setattr(self, f"block{i}", EncoderBlock(cfg, rng))
        self.final_norm = init_ones((cfg.d_model,))

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.n_layers)]

    def __call__(self, images, patch_size, ctx=None):
        patches = patchify(images, patch_size)
        if patches.shape[1:] != (self.pos.shape[0], self.patch_proj.shape[0]):
            raise ValueError(f"image gives {patches.shape[1]} patches of size {patches.shape[2]}, "
                             f"encoder expects {self.pos.shape[0]} of size {self.patch_proj.shape[0]}")
        x = Tensor(patches) @ self.patch_proj + self.patch_bias + self.pos
        for block in self.blocks:
            x = block(x, None, ctx)
        return layer_norm(x, self.final_norm)


def encode_image(encoder, img, k, ctx=None):
    """Returns ``(raw_patches, tiled)`` for a single ImageGrid."""
    if not isinstance(img, ImageGrid):
        raise TypeError("encode_image expects an ImageGrid; call ImageEncoder directly for batches")
    raw = encoder(img.pixels[None], img.patch_size, ctx)
    raw = raw.reshape(raw.shape[1], raw.shape[2])
    return raw, tile_to_k(raw, k)
