"""
Central finite-difference check of the joint loss gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from multisource_qa.core.blocks import BlockConfig, ForwardContext
from multisource_qa.core.encoders import BOS_ID, EOS_ID, PAD_ID
from multisource_qa.core.model import Batch, ModelOptions
from multisource_qa.core.moe import MoEConfig
from multisource_qa.core.tensor import no_grad, zero_grad

logger = logging.getLogger("multisource_qa.core.gradcheck")

MAX_CHECK_WIDTH = 16
# denominator floor: entries with near-zero gradients are judged by absolute error
REL_ERROR_FLOOR = 1e-5
FIRST_ORDINARY_ID = EOS_ID + 1


def toy_configs():
    """d=8, k=8, two layers, V=16, decoder-odd MoE with aux weight 0.1."""
    block = BlockConfig(d_model=8, n_heads=2, d_ff=16, n_enc_layers=2, n_dec_layers=2, k=8, vocab_size=16)
    options = ModelOptions(image_size=8, patch_size=4, max_answer_len=2)
    moe = MoEConfig(enabled=True, n_experts=4, k_top=2, site="decoder", layers="odd", aux_weight=0.1)
    return block, options, moe


@dataclass
class GradcheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry] = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e.rel_error) if self.entries else None

    @property
    def passed(self):
        return all(e.rel_error <= self.tolerance for e in self.entries)


def random_batch(model, batch_size, rng):
    """A random batch shaped for ``model``; text rows end with a little padding."""
    k = model.cfg.k
    vocab = model.cfg.vocab_size
    opts = model.options
    length = opts.decoder_length

    def text_rows():
        rows = rng.integers(FIRST_ORDINARY_ID, vocab, size=(batch_size, k))
        for row in rows:
            row[rng.integers(k // 2, k + 1):] = PAD_ID
        return rows

    answers = [list(rng.integers(FIRST_ORDINARY_ID, vocab, size=rng.integers(1, opts.max_answer_len + 1)))
               for _ in range(batch_size)]
    dec_in = np.full((batch_size, length), PAD_ID, dtype=np.int64)
    targets = np.full((batch_size, length), PAD_ID, dtype=np.int64)
    for i, answer in enumerate(answers):
        dec_in[i, :len(answer) + 1] = [BOS_ID] + answer
        targets[i, :len(answer) + 1] = answer + [EOS_ID]
    return Batch(
        question=text_rows(),
        context=text_rows(),
        images=rng.uniform(0.0, 1.0, size=(batch_size, opts.image_channels, opts.image_size, opts.image_size)),
        decoder_input=dec_in,
        targets=targets,
        attribute_ids=np.zeros(batch_size, dtype=np.int64),
        source_labels=["both"] * batch_size,
        answers=[[int(t) for t in a] for a in answers],
        ids=list(range(batch_size)),
    )


def _loss(model, batch):
    return model.forward(batch, ForwardContext(training=False)).losses.total


def run_gradcheck(model, batch, n_params=50, h=1e-4, tolerance=1e-3, seed=0, grad_hook=None):
    """
    Compare autograd against central differences on ``n_params`` sampled entries.

    Gate noise is off (evaluation context). ``grad_hook(grads)`` may rewrite
    the analytic gradients, keyed by parameter name, before comparison.

    Raises:
        ValueError: the model is wider than the check supports
    """
    if model.cfg.d_model > MAX_CHECK_WIDTH:
        raise ValueError(f"gradient check needs d_model <= {MAX_CHECK_WIDTH}, got {model.cfg.d_model}")
    params = model.parameters()
    zero_grad(params)
    _loss(model, batch).backward()
    grads = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    zero_grad(params)
    if grad_hook is not None:
        grads = grad_hook(grads) or grads

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    with no_grad():
        for _ in range(n_params):
            p = params[int(rng.integers(len(params)))]
            idx = int(rng.integers(p.size))
            original = p.data.flat[idx]
            p.data.flat[idx] = original + h
            f_plus = _loss(model, batch).item()
            p.data.flat[idx] = original - h
            f_minus = _loss(model, batch).item()
            p.data.flat[idx] = original

            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[p.name].flat[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)
            report.entries.append(GradcheckEntry(p.name, idx, analytic, numeric, rel))
            if rel > tolerance:
                logger.debug(f"{p.name}[{idx}]: analytic {analytic:.6e}, numeric {numeric:.6e}, rel {rel:.2e}")
    return report
