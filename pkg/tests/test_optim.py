import numpy as np
import pytest

from multisource_qa.core.module import Parameter
from multisource_qa.core.optim import OptimizerState, adam_step


def _param(name, data, grad=None, trainable=True):
    p = Parameter(np.asarray(data, dtype=np.float64), name=name, trainable=trainable)
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return p


@pytest.mark.parametrize("epoch, expected", [
    (1, 1e-3), (5, 1e-3), (6, 2e-4), (8, 2e-4), (9, 4e-5), (10, 4e-5),
])
def test_step_schedule(epoch, expected):
    assert OptimizerState().lr_at(epoch) == pytest.approx(expected, rel=1e-12)


def test_first_step_moves_by_learning_rate():
    p = _param("w", [1.0, -2.0, 0.5], grad=[0.3, -4.0, 2.0])
    state = OptimizerState()
    lr = adam_step([p], state, epoch=1)
    assert lr == 1e-3
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], atol=1e-9)
    assert state.step == 1
    assert set(state.first_moment) == {"w"}


def test_frozen_parameters_are_bit_identical():
    frozen = _param("frozen", [0.1, 0.2], grad=[5.0, 5.0], trainable=False)
    live = _param("live", [0.1, 0.2], grad=[5.0, 5.0])
    before = frozen.data.copy()
    state = OptimizerState()
    adam_step([frozen, live], state, epoch=1)
    np.testing.assert_array_equal(frozen.data, before)
    assert "frozen" not in state.first_moment
    assert not np.array_equal(live.data, before)


def test_gradients_are_cleared():
    p = _param("w", [1.0], grad=[1.0])
    q = _param("q", [1.0], grad=[1.0], trainable=False)
    adam_step([p, q], OptimizerState(), epoch=1)
    assert p.grad is None and q.grad is None


def test_missing_gradient_is_an_error():
    with pytest.raises(ValueError, match="w"):
        adam_step([_param("w", [1.0])], OptimizerState(), epoch=1)


def test_frozen_parameter_may_lack_gradient():
    adam_step([_param("w", [1.0], trainable=False)], OptimizerState(), epoch=1)


def test_state_dict_round_trip_keeps_schedule():
    state = OptimizerState(base_lr=0.01, decay_factor=0.5, decay_epochs=[2], step=7)
    restored = OptimizerState.from_dict(state.to_dict())
    assert restored.step == 7
    assert restored.lr_at(3) == pytest.approx(0.005)
    assert restored.betas == (0.9, 0.999)
