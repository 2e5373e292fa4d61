"""
Adam with a step learning-rate schedule.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

logger = logging.getLogger("multisource_qa.core.optim")


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the schedule."""
    base_lr: float = 1e-3
    decay_factor: float = 0.2
    decay_epochs: List[int] = field(default_factory=lambda: [6, 9])
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, epoch):
        """Learning rate in effect during ``epoch`` (1-based)."""
        n_decays = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.base_lr * self.decay_factor ** n_decays

    def to_dict(self):
        return {
            "base_lr": self.base_lr,
            "decay_factor": self.decay_factor,
            "decay_epochs": list(self.decay_epochs),
            "betas": list(self.betas),
            "eps": self.eps,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            base_lr=data["base_lr"],
            decay_factor=data["decay_factor"],
            decay_epochs=list(data["decay_epochs"]),
            betas=tuple(data["betas"]),
            eps=data["eps"],
            step=data["step"],
        )


def adam_step(params, state, epoch):
    """
    One bias-corrected Adam update at the scheduled rate for ``epoch``.

    Non-trainable parameters are never touched. All gradients are cleared.

    Raises:
        ValueError: a trainable parameter has no gradient
    """
    missing = [p.name for p in params if p.trainable and p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for trainable parameter(s) {missing[:5]}")

    lr = state.lr_at(epoch)
    beta1, beta2 = state.betas
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    for p in params:
        if p.trainable:
            g = p.grad
            m = state.first_moment.get(p.name)
            v = state.second_moment.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            state.first_moment[p.name] = m
            state.second_moment[p.name] = v
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.grad = None
    return lr
