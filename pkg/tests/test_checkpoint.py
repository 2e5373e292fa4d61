import numpy as np
import pytest

from multisource_qa.core.blocks import ForwardContext
from multisource_qa.core.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from multisource_qa.core.model import Model, collate
from multisource_qa.core.moe import MoEConfig, moe_layers
from multisource_qa.core.trainer import OptimConfig, TrainState, train


@pytest.fixture
def moe_model(tiny_block, tiny_options, tiny_moe):
    return Model(tiny_block, tiny_options, tiny_moe, seed=3)


@pytest.fixture
def saved(tmp_path, moe_model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), moe_model, epoch=2, run_config={"seed": 3})
    return path


def test_round_trip_gives_identical_logits(saved, moe_model, tiny_splits, tiny_block, tiny_options):
    batch = collate(tiny_splits["val"].samples, tiny_block.k, tiny_options.max_answer_len)
    ckpt = load_checkpoint(str(saved))
    expected = moe_model.forward(batch, ForwardContext()).logits.data
    np.testing.assert_array_equal(ckpt.model.forward(batch, ForwardContext()).logits.data, expected)
    assert ckpt.epoch == 2
    assert ckpt.run_config == {"seed": 3}
    assert ckpt.optimizer is None and ckpt.rng() is None


def test_moe_layers_survive(saved):
    ckpt = load_checkpoint(str(saved))
    assert [name for name, _ in moe_layers(ckpt.model)] == ["decoder.block1.ffn"]
    header, _ = read_header(str(saved))
    assert header["moe_layers"] == ["decoder.block1.ffn"]
    assert header["version"] == "01"


def test_flipped_byte_fails_checksum(saved):
    blob = bytearray(saved.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(str(saved))


def test_version_mismatch_names_both_versions(saved):
    blob = bytearray(saved.read_bytes())
    blob[6:8] = b"02"
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(str(saved))
    assert "02" in str(err.value) and "01" in str(err.value)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        read_header(str(path))


def test_optimizer_and_flags_are_preserved(tmp_path, tiny_block, tiny_options, tiny_splits):
    moe = MoEConfig(enabled=True, n_experts=4, k_top=2, train_mode="experts_only")
    model = Model(tiny_block, tiny_options, moe)
    _, state = train(model, tiny_splits["train"].samples, OptimConfig(epochs=1), seed=5)
    path = tmp_path / "epoch1.ckpt"
    save_checkpoint(str(path), model, state.optimizer, state.epoch, state.rng)

    ckpt = load_checkpoint(str(path))
    assert {p.name: p.trainable for p in ckpt.model.parameters()} == {p.name: p.trainable for p in model.parameters()}
    assert ckpt.optimizer.step == state.optimizer.step
    assert set(ckpt.optimizer.first_moment) == set(state.optimizer.first_moment)
    for name, m in state.optimizer.first_moment.items():
        np.testing.assert_array_equal(ckpt.optimizer.first_moment[name], m)
        np.testing.assert_array_equal(ckpt.optimizer.second_moment[name], state.optimizer.second_moment[name])
    assert ckpt.rng().bit_generator.state == state.rng.bit_generator.state


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path, tiny_block, tiny_options, tiny_moe, tiny_splits):
    samples = tiny_splits["train"].samples
    full = Model(tiny_block, tiny_options, tiny_moe, seed=8)
    train(full, samples, OptimConfig(epochs=2), seed=2)

    first = Model(tiny_block, tiny_options, tiny_moe, seed=8)
    _, state = train(first, samples, OptimConfig(epochs=1), seed=2)
    path = tmp_path / "epoch1.ckpt"
    save_checkpoint(str(path), first, state.optimizer, state.epoch, state.rng)

    ckpt = load_checkpoint(str(path))
    resumed = TrainState(epoch=ckpt.epoch, optimizer=ckpt.optimizer, rng=ckpt.rng())
    train(ckpt.model, samples, OptimConfig(epochs=2), seed=2, state=resumed)

    a, b = full.state_dict(), ckpt.model.state_dict()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)
