"""
Shared fixtures: tiny model / data configurations and seeded generators.
"""
import json
import os
from types import SimpleNamespace

import numpy as np
import pytest

from multisource_qa.config import RunConfig
from multisource_qa.core.blocks import BlockConfig
from multisource_qa.core.model import ModelOptions
from multisource_qa.core.moe import MoEConfig
from multisource_qa.core.synth import SPLITS, SynthConfig, generate_dataset, save_dataset
from multisource_qa.core.tensor import Tensor
from multisource_qa.core.trainer import OptimConfig

RUN_SLOW = os.environ.get("MSQA_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with MSQA_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set MSQA_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth():
    """4 attributes x 4 values; vocabulary of 27 tokens, k=8, 8x8 images with 4x4 patches."""
    return SynthConfig(
        n_attributes=4,
        n_values=4,
        n_distractor_words=4,
        n_distractor_pairs=1,
        max_distractor_words=2,
        k=8,
        image_size=8,
        patch_size=4,
        n_train=24,
        n_val=8,
        n_test=8,
        seed=3,
    )


@pytest.fixture
def tiny_block():
    return BlockConfig(d_model=8, n_heads=2, d_ff=16, n_enc_layers=2, n_dec_layers=2, k=8, vocab_size=27)


@pytest.fixture
def tiny_options():
    return ModelOptions(image_size=8, patch_size=4, max_answer_len=2)


@pytest.fixture
def tiny_moe():
    return MoEConfig(enabled=True, n_experts=4, k_top=2, site="decoder", layers="odd")


@pytest.fixture
def tiny_optim():
    return OptimConfig(epochs=1, batch_size=4, eval_batch_size=8)


@pytest.fixture
def tiny_splits(tiny_synth):
    return {split: generate_dataset(tiny_synth, split) for split in SPLITS}


@pytest.fixture
def dataset_dir(tmp_path, tiny_splits):
    root = tmp_path / "data"
    root.mkdir()
    for split, ds in tiny_splits.items():
        save_dataset(ds, str(root / f"{split}.jsonl"))
    return root


@pytest.fixture
def tiny_run_config(tmp_path, tiny_block, tiny_options, tiny_optim, dataset_dir):
    return RunConfig(
        model=tiny_block,
        options=tiny_options,
        moe=MoEConfig(),
        optim=tiny_optim,
        seed=0,
        dataset=str(dataset_dir),
        out_dir=str(tmp_path / "run"),
    ).validate()


@pytest.fixture
def run_config_file(tmp_path, tiny_run_config):
    path = tmp_path / "run.json"
    flat = tiny_run_config.to_flat()
    del flat["dataset"], flat["out_dir"]
    path.write_text(json.dumps(flat))
    return path


@pytest.fixture
def numeric_grad():
    """Central-difference gradient of a scalar function of one array."""

    def compute(fn, x, h=1e-6):
        x = np.array(x, dtype=np.float64)
        grad = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            plus = fn(Tensor(x)).item()
            x[idx] = orig - h
            minus = fn(Tensor(x)).item()
            x[idx] = orig
            grad[idx] = (plus - minus) / (2 * h)
        return grad

    return compute


@pytest.fixture
def reference_ops():
    """Plain numpy encoder-block math, written head by head."""

    def layer_norm(x, gain, eps=1e-6):
        centered = x - x.mean(axis=-1, keepdims=True)
        return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps) * gain

    def attention(h, attn, n_heads):
        q, k, v = h @ attn.wq.data, h @ attn.wk.data, h @ attn.wv.data
        dh = h.shape[-1] // n_heads
        heads = []
        for i in range(n_heads):
            cols = slice(i * dh, (i + 1) * dh)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            heads.append((w / w.sum(axis=1, keepdims=True)) @ v[:, cols])
        return np.concatenate(heads, axis=1) @ attn.wo.data

    def encoder_block(x, block, n_heads):
        x = x + attention(layer_norm(x, block.norm1.data), block.attn, n_heads)
        h = layer_norm(x, block.norm2.data)
        ffn = block.ffn
        return x + np.maximum(h @ ffn.w1.data + ffn.b1.data, 0.0) @ ffn.w2.data + ffn.b2.data

    return SimpleNamespace(layer_norm=layer_norm, attention=attention, encoder_block=encoder_block)
