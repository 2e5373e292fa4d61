import dataclasses

import numpy as np
import pytest

from multisource_qa.core.blocks import BlockConfig
from multisource_qa.core.gradcheck import random_batch, run_gradcheck, toy_configs
from multisource_qa.core.model import build_model


def _toy_model(**overrides):
    cfg, options, moe = toy_configs()
    if "alignment" in overrides:
        options = dataclasses.replace(options, alignment=overrides["alignment"])
    if "aux_weight" in overrides:
        moe = dataclasses.replace(moe, aux_weight=overrides["aux_weight"])
    return build_model(cfg, options, moe, seed=0)


def test_toy_model_passes():
    model = _toy_model()
    report = run_gradcheck(model, random_batch(model, 2, np.random.default_rng(0)), n_params=50)
    assert len(report.entries) == 50
    assert report.passed, report.worst


def test_without_alignment_or_aux():
    model = _toy_model(alignment=False, aux_weight=0.0)
    report = run_gradcheck(model, random_batch(model, 2, np.random.default_rng(1)), n_params=20, seed=1)
    assert report.passed, report.worst


def test_corrupted_gradient_is_caught():
    model = _toy_model()
    batch = random_batch(model, 2, np.random.default_rng(0))
    names = {p.name for p in model.parameters()}

    def corrupt(grads):
        return {name: g * 3.0 + 0.01 for name, g in grads.items()}

    report = run_gradcheck(model, batch, n_params=10, grad_hook=corrupt)
    assert not report.passed
    assert report.worst.name in names
    assert report.worst.rel_error > 1e-3


def test_parameters_are_restored():
    model = _toy_model()
    before = model.state_dict()
    run_gradcheck(model, random_batch(model, 2, np.random.default_rng(0)), n_params=5)
    after = model.state_dict()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])


def test_wide_models_are_refused():
    model = build_model(BlockConfig(d_model=32, n_heads=4, d_ff=64, k=32, vocab_size=16))
    with pytest.raises(ValueError, match="d_model"):
        run_gradcheck(model, random_batch(model, 1, np.random.default_rng(0)))


def test_random_batch_shapes():
    model = _toy_model()
    batch = random_batch(model, 3, np.random.default_rng(0))
    assert batch.question.shape == (3, 8)
    assert batch.images.shape == (3, 3, 8, 8)
    assert batch.targets.shape == (3, model.options.decoder_length)
    assert np.all(batch.question[:, 0] > 2)
