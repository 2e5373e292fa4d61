"""
Mini-batch training with teacher forcing, and batched evaluation.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from multisource_qa.core.blocks import ForwardContext
from multisource_qa.core.metrics import PredictionRecord, accuracy, recall_at_precision
from multisource_qa.core.moe import routing_records
from multisource_qa.core.model import collate
from multisource_qa.core.optim import OptimizerState, adam_step
from multisource_qa.core.tensor import zero_grad

logger = logging.getLogger("multisource_qa.core.trainer")

LOSS_KEYS = ("dec", "qca", "qia", "aux", "lambda", "total")


class DivergenceError(RuntimeError):
    """The joint loss became NaN or infinite."""

    def __init__(self, epoch, step, components):
        self.epoch = epoch
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.4g}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, step {step} ({detail})")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    decay_factor: float = 0.2
    decay_epochs: List[int] = field(default_factory=lambda: [6, 9])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    eval_batch_size: int = 64
    eval_workers: int = 1

    def validate(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_workers < 1:
            raise ValueError(f"eval_workers must be >= 1, got {self.eval_workers}")
        return self

    def optimizer_state(self):
        return OptimizerState(
            base_lr=self.lr,
            decay_factor=self.decay_factor,
            decay_epochs=list(self.decay_epochs),
            betas=(self.beta1, self.beta2),
            eps=self.eps,
        )


@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` completed epochs."""
    epoch: int
    optimizer: OptimizerState
    rng: np.random.Generator


@dataclass
class TrainingLog:
    records: List[Dict] = field(default_factory=list)

    @property
    def last(self):
        return self.records[-1] if self.records else None


def evaluate(model, samples, batch_size=64, workers=1):
    """Greedy-decode every sample; returns PredictionRecords in input order."""
    k = model.cfg.k
    max_len = model.options.max_answer_len
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(chunk):
        batch = collate(chunk, k, max_len)
        generations = model.generate(batch)
        return [
            PredictionRecord(
                predicted=g.tokens,
                confidence=g.confidence,
                gold=list(s.answer_ids),
                attribute_id=s.attribute_id,
                source_label=s.source_label,
                alpha_mean=g.alpha_mean,
            )
            for s, g in zip(chunk, generations)
        ]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [r for part in parts for r in part]


def validation_metrics(records):
    recall, threshold = recall_at_precision(records, 0.9)
    return {
        "accuracy": accuracy(records),
        "recall_at_90": recall,
        "threshold": threshold if math.isfinite(threshold) else None,
    }


def _write_record(log_file, record):
    if log_file is not None:
        log_file.write(json.dumps(record, sort_keys=True) + "\n")
        log_file.flush()


def train(model, train_samples, optim, seed=0, val_samples=None, log_path=None,
          config_record=None, state: Optional[TrainState] = None, on_epoch_end=None):
    """
    Train ``model`` for ``optim.epochs`` epochs (1-based).

    Shuffling and gate noise draw from one seeded generator, so a run resumed
    from a TrainState continues exactly as the uninterrupted run would.

    Raises:
        DivergenceError: the joint loss is not finite
    """
    if not train_samples:
        raise ValueError("training set is empty")
    optim.validate()
    if state is None:
        state = TrainState(epoch=0, optimizer=optim.optimizer_state(), rng=np.random.default_rng(seed))
    k = model.cfg.k
    max_len = model.options.max_answer_len
    params = model.parameters()
    n = len(train_samples)
    log = TrainingLog()

    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a" if state.epoch else "w", encoding="utf-8")
    try:
        if config_record is not None and state.epoch == 0:
            _write_record(log_file, {"type": "config", "config": config_record})

        for epoch in range(state.epoch + 1, optim.epochs + 1):
            lr = state.optimizer.lr_at(epoch)
            order = state.rng.permutation(n)
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            routing = {}
            n_batches = 0
            for step, start in enumerate(range(0, n, optim.batch_size), 1):
                batch = collate([train_samples[i] for i in order[start:start + optim.batch_size]], k, max_len)
                ctx = ForwardContext(training=True, rng=state.rng)
                out = model.forward(batch, ctx)
                parts = out.losses.as_floats()
                if not all(math.isfinite(parts[key]) for key in LOSS_KEYS):
                    raise DivergenceError(epoch, step, {key: parts[key] for key in LOSS_KEYS})

                zero_grad(params)
                out.losses.total.backward()
                adam_step(params, state.optimizer, epoch)

                for key in LOSS_KEYS:
                    sums[key] += parts[key]
                for name, stats in out.routing.items():
                    routing[name] = stats.detached() if name not in routing else routing[name].merge(stats)
                n_batches += 1

            record = {
                "type": "epoch",
                "epoch": epoch,
                "lr": lr,
                "steps": n_batches,
                "losses": {key: sums[key] / n_batches for key in LOSS_KEYS},
                "routing": routing_records(routing),
            }
            if val_samples:
                records = evaluate(model, val_samples, optim.eval_batch_size, optim.eval_workers)
                record["val"] = validation_metrics(records)
            state.epoch = epoch
            log.records.append(record)
            _write_record(log_file, record)

            val_text = ""
            if "val" in record:
                val_text = f", val acc {record['val']['accuracy']:.3f}, R@90 {record['val']['recall_at_90']:.3f}"
            logger.info(f"Epoch {epoch}/{optim.epochs}: lr {lr:.2e}, loss {record['losses']['total']:.4f}{val_text}")
            if on_epoch_end is not None:
                on_epoch_end(model, state, record)
    finally:
        if log_file is not None:
            log_file.close()
    return log, state
