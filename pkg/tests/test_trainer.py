import json

import numpy as np
import pytest

from multisource_qa.core.blocks import ForwardContext
from multisource_qa.core.model import Model, collate
from multisource_qa.core.moe import MoEConfig, expert_parameter_names
from multisource_qa.core.optim import OptimizerState, adam_step
from multisource_qa.core.tensor import Tensor, zero_grad
from multisource_qa.core.trainer import (
    LOSS_KEYS,
    DivergenceError,
    OptimConfig,
    evaluate,
    train,
    validation_metrics,
)
from multisource_qa.utils import changed_parameters, parameter_digests


@pytest.fixture
def model(tiny_block, tiny_options):
    return Model(tiny_block, tiny_options, seed=1)


def test_epoch_records(model, tiny_splits):
    optim = OptimConfig(epochs=2, batch_size=8, decay_epochs=[2], eval_batch_size=8)
    log, state = train(model, tiny_splits["train"].samples, optim, seed=0, val_samples=tiny_splits["val"].samples)
    assert [r["epoch"] for r in log.records] == [1, 2]
    assert [r["lr"] for r in log.records] == pytest.approx([1e-3, 2e-4])
    assert log.last["steps"] == 3
    assert set(log.last["losses"]) == set(LOSS_KEYS)
    assert log.last["losses"]["lambda"] == 0.0
    assert 0.0 <= log.last["val"]["accuracy"] <= 1.0
    assert log.last["routing"] == []
    assert state.epoch == 2


def test_log_file_lines(model, tiny_splits, tmp_path):
    path = tmp_path / "train.log"
    train(model, tiny_splits["train"].samples, OptimConfig(epochs=1), log_path=str(path),
          config_record={"seed": 0})
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["type"] for r in lines] == ["config", "epoch"]
    assert lines[0]["config"] == {"seed": 0}
    assert all(np.isfinite(v) for v in lines[1]["losses"].values())


def test_empty_training_set(model):
    with pytest.raises(ValueError):
        train(model, [], OptimConfig())


def test_resumed_run_matches_uninterrupted(tiny_block, tiny_options, tiny_moe, tiny_splits):
    samples = tiny_splits["train"].samples
    full = Model(tiny_block, tiny_options, tiny_moe, seed=4)
    train(full, samples, OptimConfig(epochs=2), seed=7)

    split = Model(tiny_block, tiny_options, tiny_moe, seed=4)
    _, state = train(split, samples, OptimConfig(epochs=1), seed=7)
    log, _ = train(split, samples, OptimConfig(epochs=2), seed=7, state=state)
    assert [r["epoch"] for r in log.records] == [2]

    a, b = full.state_dict(), split.state_dict()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


def test_divergence_is_reported(model, tiny_splits, monkeypatch):
    original = model.forward

    def diverging(batch, ctx=None):
        out = original(batch, ctx)
        out.losses.total = Tensor(float("nan"))
        return out

    monkeypatch.setattr(model, "forward", diverging)
    with pytest.raises(DivergenceError) as err:
        train(model, tiny_splits["train"].samples, OptimConfig(epochs=1))
    assert err.value.epoch == 1 and err.value.step == 1
    assert np.isnan(err.value.components["total"])


def test_experts_only_training_freezes_backbone(tiny_block, tiny_options, tiny_splits):
    moe = MoEConfig(enabled=True, n_experts=4, k_top=2, train_mode="experts_only")
    model = Model(tiny_block, tiny_options, moe)
    before = parameter_digests(model)
    log, _ = train(model, tiny_splits["train"].samples, OptimConfig(epochs=1))
    assert log.last["losses"]["lambda"] == pytest.approx(moe.aux_weight)
    changed = set(changed_parameters(before, parameter_digests(model)))
    assert changed
    assert changed <= set(expert_parameter_names(model))
    assert "decoder.block1.ffn.gate" in changed


def test_evaluate_with_workers_matches_serial(model, tiny_splits):
    samples = tiny_splits["test"].samples
    serial = evaluate(model, samples, batch_size=3, workers=1)
    pooled = evaluate(model, samples, batch_size=3, workers=2)
    assert [(r.predicted, r.confidence) for r in serial] == [(r.predicted, r.confidence) for r in pooled]
    assert [r.gold for r in serial] == [list(s.answer_ids) for s in samples]
    metrics = validation_metrics(serial)
    assert set(metrics) == {"accuracy", "recall_at_90", "threshold"}


@pytest.mark.parametrize("kwargs", [
    {"lr": -1.0}, {"batch_size": 0}, {"epochs": -1}, {"eval_workers": 0},
])
def test_optim_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs).validate()


def test_backbone_only_training_freezes_experts(tiny_block, tiny_options, tiny_splits):
    moe = MoEConfig(enabled=True, n_experts=4, k_top=2, train_mode="backbone_only")
    model = Model(tiny_block, tiny_options, moe)
    before = parameter_digests(model)
    train(model, tiny_splits["train"].samples, OptimConfig(epochs=1))
    changed = set(changed_parameters(before, parameter_digests(model)))
    assert changed
    assert not changed & set(expert_parameter_names(model))


def test_zero_learning_rate_leaves_parameters(model, tiny_splits):
    before = model.state_dict()
    log, _ = train(model, tiny_splits["train"].samples[:8], OptimConfig(epochs=1, lr=0.0, batch_size=4))
    assert log.last["steps"] == 2
    assert np.isfinite(log.last["losses"]["total"])
    after = model.state_dict()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name], err_msg=name)


def test_loss_falls_on_a_fixed_batch(model, tiny_block, tiny_options, tiny_splits):
    batch = collate(tiny_splits["train"].samples[:4], tiny_block.k, tiny_options.max_answer_len)
    params = model.parameters()
    state = OptimizerState()
    rng = np.random.default_rng(0)
    totals = []
    for _ in range(50):
        out = model.forward(batch, ForwardContext(training=True, rng=rng))
        totals.append(out.losses.total.item())
        zero_grad(params)
        out.losses.total.backward()
        adam_step(params, state, epoch=1)
    assert totals[-1] < totals[0]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


@pytest.mark.slow
def test_smoke_train_stays_finite(tiny_block, tiny_options, tiny_moe, tiny_splits):
    model = Model(tiny_block, tiny_options, tiny_moe, seed=2)
    log, state = train(model, tiny_splits["train"].samples, OptimConfig(epochs=34, batch_size=4), seed=2)
    assert sum(r["steps"] for r in log.records) >= 200
    assert state.optimizer.step == sum(r["steps"] for r in log.records)
    assert all(np.isfinite(v) for r in log.records for v in r["losses"].values())
