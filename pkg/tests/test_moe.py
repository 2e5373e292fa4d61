import numpy as np
import pytest

from multisource_qa.core.blocks import FeedForward, ForwardContext
from multisource_qa.core.model import Model
from multisource_qa.core.moe import (
    MoEConfig,
    MoELayer,
    MoEPlacement,
    RoutingStats,
    aux_loss,
    expert_parameter_names,
    gate,
    mean_aux_loss,
    moe_forward,
    moe_layers,
    resolve_layers,
    routing_records,
    set_train_mode,
)
from multisource_qa.core.tensor import Tensor


@pytest.fixture
def layer(rng):
    return MoELayer(8, 16, MoEConfig(n_experts=4, k_top=2), rng, layer_name="test.ffn")


def _dense_oracle(x, layer):
    """Every expert on every token, weighted by an independently computed top-k softmax."""
    logits = x @ layer.gate.data
    weights = np.zeros_like(logits)
    for i, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:layer.k_top]
        e = np.exp(row[top] - row[top].max())
        weights[i, top] = e / e.sum()
    out = np.zeros_like(x)
    for j, expert in enumerate(layer.experts):
        out += weights[:, j:j + 1] * expert(Tensor(x)).data
    return out


class TestAuxLoss:
    def test_uniform_routing_is_one(self):
        stats = RoutingStats(4, top1_counts=[25, 25, 25, 25], weight_sums=np.full(4, 25.0), token_count=100)
        assert aux_loss(stats).item() == 1.0

    def test_all_to_one_is_n(self):
        stats = RoutingStats(4, top1_counts=[10, 0, 0, 0], weight_sums=[10.0, 0.0, 0.0, 0.0], token_count=10)
        assert aux_loss(stats).item() == 4.0

    def test_matches_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 9))
            tokens = int(rng.integers(1, 50))
            counts = np.bincount(rng.integers(0, n, size=tokens), minlength=n)
            sums = rng.dirichlet(np.ones(n), size=tokens).sum(axis=0)
            oracle = n * sum((counts[i] / tokens) * (sums[i] / tokens) for i in range(n))
            stats = RoutingStats(n, top1_counts=counts, weight_sums=sums, token_count=tokens)
            assert abs(aux_loss(stats).item() - oracle) < 1e-12

    def test_empty_stats_are_an_error(self):
        with pytest.raises(ValueError):
            aux_loss(RoutingStats(4))

    def test_mean_over_layers(self):
        uniform = RoutingStats(4, [1, 1, 1, 1], np.full(4, 1.0), 4)
        skewed = RoutingStats(4, [4, 0, 0, 0], [4.0, 0.0, 0.0, 0.0], 4)
        assert mean_aux_loss({"a": uniform, "b": skewed}).item() == pytest.approx(2.5)
        assert mean_aux_loss({}).item() == 0.0


class TestGate:
    def test_contract_on_random_tokens(self, layer, rng):
        for _ in range(10000):
            x = rng.normal(size=8)
            weights, top = gate(x, layer)
            assert np.count_nonzero(weights > 0) == 2
            assert abs(weights.sum() - 1.0) < 1e-12
            assert set(np.nonzero(weights)[0]) == set(top)

    def test_deterministic_without_noise(self, layer, rng):
        x = rng.normal(size=8)
        a, _ = gate(x, layer)
        b, _ = gate(x, layer)
        np.testing.assert_array_equal(a, b)

    def test_ties_go_to_lower_index(self, layer):
        layer.gate.data[:] = 0.0
        weights, top = gate(np.ones(8), layer)
        assert top == [0, 1]
        assert weights.tolist() == [0.5, 0.5, 0.0, 0.0]

    def test_extreme_logit_gap_keeps_k_positive_weights(self, layer):
        layer.gate.data[:] = 0.0
        layer.gate.data[:, 0] = 1000.0 / 8
        weights, top = gate(np.ones(8), layer)
        assert top == [0, 1]
        assert np.count_nonzero(weights > 0) == 2
        assert weights[0] == 1.0 and weights.sum() == 1.0

    def test_training_noise_needs_rng(self, layer, rng):
        with pytest.raises(ValueError):
            gate(rng.normal(size=8), layer, training=True)
        weights, _ = gate(rng.normal(size=8), layer, training=True, rng=rng)
        assert np.count_nonzero(weights) == 2


class TestMoEForward:
    def test_sparse_equals_dense(self, layer, rng):
        x = rng.normal(size=(1000, 8))
        out = moe_forward(Tensor(x), layer)
        assert np.max(np.abs(out.data - _dense_oracle(x, layer))) < 1e-12

    def test_batched_shape_and_stats(self, layer, rng):
        stats = RoutingStats(4)
        out = moe_forward(Tensor(rng.normal(size=(2, 5, 8))), layer, stats)
        assert out.shape == (2, 5, 8)
        assert stats.token_count == 10
        assert stats.f.sum() == pytest.approx(1.0)
        assert stats.P.sum() == pytest.approx(1.0)

    def test_every_expert_gets_a_gradient(self, layer, rng):
        layer.gate.data[:] = 0.0  # all tokens routed to experts 0 and 1
        moe_forward(Tensor(rng.normal(size=(6, 8))), layer).sum().backward()
        for p in layer.parameters():
            assert p.grad is not None
        assert np.all(layer.expert3.w1.grad == 0.0)

    def test_layer_records_into_context(self, layer, rng):
        ctx = ForwardContext()
        layer(Tensor(rng.normal(size=(3, 8))), ctx)
        layer(Tensor(rng.normal(size=(3, 8))), ctx)
        assert ctx.routing["test.ffn"].token_count == 6
        records = routing_records(ctx.routing)
        assert len(records) == 4 and {r["layer"] for r in records} == {"test.ffn"}

    def test_merge_is_detached(self, layer, rng):
        a, b = RoutingStats(4), RoutingStats(4)
        moe_forward(Tensor(rng.normal(size=(3, 8))), layer, a)
        moe_forward(Tensor(rng.normal(size=(2, 8))), layer, b)
        merged = a.merge(b)
        assert merged.token_count == 5
        assert not merged.weight_sums.requires_grad
        np.testing.assert_allclose(merged.P * 5, a.P * 3 + b.P * 2)


def test_from_dense_clones_with_small_perturbation(rng):
    dense = FeedForward(8, 16, rng)
    layer = MoELayer.from_dense(dense, MoEConfig(n_experts=3), rng)
    for expert in layer.experts:
        diff = np.abs(expert.w1.data - dense.w1.data)
        assert 0 < diff.max() < 0.1


@pytest.mark.parametrize("selector, expected", [
    ("all", [0, 1, 2, 3]), ("even", [0, 2]), ("odd", [1, 3]), ("last", [3]), ("last2", [2, 3]),
])
def test_resolve_layers(selector, expected):
    assert resolve_layers(selector, 4) == expected


def test_placement_rejects_unknown_values():
    with pytest.raises(ValueError, match="site"):
        MoEPlacement("middle")
    with pytest.raises(ValueError):
        MoEConfig(k_top=5).validate()


class TestPlacement:
    def test_decoder_odd(self, tiny_block, tiny_options, tiny_moe):
        model = Model(tiny_block, tiny_options, tiny_moe)
        assert [name for name, _ in moe_layers(model)] == ["decoder.block1.ffn"]
        names = {p.name for p in model.parameters()}
        assert "decoder.block1.ffn.expert0.w1" in names
        assert "decoder.block1.ffn.gate" in names

    def test_both_all_covers_every_stack(self, tiny_block, tiny_options):
        moe = MoEConfig(enabled=True, site="both", layers="all")
        model = Model(tiny_block, tiny_options, moe)
        names = [name for name, _ in moe_layers(model)]
        assert len(names) == 2 * 4
        assert "encoder.image.block0.ffn" in names

    def test_converting_twice_is_an_error(self, tiny_block, tiny_options, tiny_moe):
        model = Model(tiny_block, tiny_options, tiny_moe)
        with pytest.raises(ValueError):
            model.enable_moe(tiny_moe)

    def test_train_modes_partition_parameters(self, tiny_block, tiny_options, tiny_moe):
        model = Model(tiny_block, tiny_options, tiny_moe)
        experts = set(expert_parameter_names(model))
        set_train_mode(model, "experts_only")
        assert {p.name for p in model.parameters() if p.trainable} == experts
        set_train_mode(model, "backbone_only")
        assert {p.name for p in model.parameters() if p.trainable} == {p.name for p in model.parameters()} - experts
        set_train_mode(model, "full")
        assert all(p.trainable for p in model.parameters())

    def test_freezing_needs_experts(self, tiny_block, tiny_options):
        with pytest.raises(ValueError):
            set_train_mode(Model(tiny_block, tiny_options), "experts_only")
