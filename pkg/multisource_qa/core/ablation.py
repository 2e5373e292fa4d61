"""
Ablation grid: fusion, alignment and encoder variants, MoE placements and
training modes, and the auxiliary-loss weight sweep, all under one seed and
one training budget.
"""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from multisource_qa.core.metrics import recall_at_precision
from multisource_qa.core.model import Model, build_model
from multisource_qa.core.moe import MoEConfig
from multisource_qa.core.trainer import evaluate, train

logger = logging.getLogger("multisource_qa.core.ablation")

AUX_WEIGHTS = (0.01, 0.1, 0.5)
ENC_DEC_AUX_WEIGHTS = (0.01, 0.1)
ABLATION_COLUMNS = [
    "variant", "status", "accuracy", "recall_at_90", "params_trained",
    "alpha_image", "alpha_context", "wall_time",
]


@dataclass
class Variant:
    name: str
    options: Dict = field(default_factory=dict)
    moe: Optional[Dict] = None
    from_backbone: bool = False
    description: str = ""


@dataclass
class AblationRow:
    variant: str
    status: str
    accuracy: float = float("nan")
    recall_at_90: float = float("nan")
    params_trained: int = 0
    alpha_image: float = float("nan")
    alpha_context: float = float("nan")
    wall_time: float = 0.0

    def as_list(self):
        return [
            self.variant, self.status, f"{self.accuracy:.4f}", f"{self.recall_at_90:.4f}",
            self.params_trained, f"{self.alpha_image:.4f}", f"{self.alpha_context:.4f}", f"{self.wall_time:.1f}",
        ]


@dataclass
class AblationResult:
    rows: List[AblationRow]
    reproduced: Optional[str] = None
    reproducible: Optional[bool] = None

    @property
    def completed(self):
        return all(r.status == "ok" for r in self.rows)


def _moe(site, layers, train_mode, aux_weight=0.1):
    return {"enabled": True, "site": site, "layers": layers, "train_mode": train_mode, "aux_weight": aux_weight}


def default_variants():
    variants = [
        Variant("qga", description="question-guided fusion with alignment, dense FFNs"),
        Variant("woqg", {"fusion_mode": "fixed"}, description="alpha = beta = 0.5"),
        Variant("woal", {"alignment": False}, description="alignment losses dropped"),
        Variant("s-enc", {"single_encoder": True, "fusion_mode": "fixed"},
                description="question and context through one encoder"),
        Variant("qga-linear", {"fusion_mode": "linear"}, description="unnormalized source weights"),
        Variant("dec-all-full", moe=_moe("decoder", "all", "full"), from_backbone=True),
        Variant("dec-last-full", moe=_moe("decoder", "last", "full"), from_backbone=True),
        Variant("dec-last2-full", moe=_moe("decoder", "last2", "full"), from_backbone=True),
        Variant("dec-even-experts", moe=_moe("decoder", "even", "experts_only"), from_backbone=True),
        Variant("dec-odd-experts", moe=_moe("decoder", "odd", "experts_only"), from_backbone=True),
        Variant("dec-odd-backbone", moe=_moe("decoder", "odd", "backbone_only"), from_backbone=True),
        Variant("dec-odd-full", moe=_moe("decoder", "odd", "full"), from_backbone=True),
        Variant("enc-all-full", moe=_moe("encoder", "all", "full"), from_backbone=True),
        Variant("both-all-full", moe=_moe("both", "all", "full"), from_backbone=True),
        Variant("both-odd-experts", moe=_moe("both", "odd", "experts_only"), from_backbone=True),
        Variant("both-even-experts", moe=_moe("both", "even", "experts_only"), from_backbone=True),
    ]
    for w in AUX_WEIGHTS:
        variants.append(Variant(f"dec-odd-experts-w{w:g}", moe=_moe("decoder", "odd", "experts_only", w),
                                from_backbone=True))
    for w in ENC_DEC_AUX_WEIGHTS:
        variants.append(Variant(f"both-all-w{w:g}", moe=_moe("both", "all", "full", w), from_backbone=True))
    return variants


def select_variants(names=None):
    variants = default_variants()
    if not names:
        return variants
    by_name = {v.name: v for v in variants}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ValueError(f"unknown ablation variant(s) {', '.join(unknown)}; known: {', '.join(by_name)}")
    return [by_name[n] for n in names]


def _mean_alpha(records, label):
    values = [r.alpha_mean for r in records if r.source_label == label]
    return float(np.mean(values)) if values else float("nan")


class AblationRunner:
    """Trains each variant from the shared run configuration and scores it on one split."""

    def __init__(self, run_config, train_samples, eval_samples):
        self.run_config = run_config
        self.train_samples = train_samples
        self.eval_samples = eval_samples
        self._backbone = None

    def _fit(self, model):
        optim = self.run_config.optim
        train(model, self.train_samples, optim, seed=self.run_config.seed)
        return model

    def backbone(self):
        """The dense question-guided model every from-backbone variant starts from."""
        if self._backbone is None:
            logger.info("Training the dense backbone")
            model = build_model(self.run_config.model, self.run_config.options, MoEConfig(), self.run_config.seed)
            self._backbone = self._fit(model)
        return self._backbone

    def build(self, variant):
        options = replace(self.run_config.options, **variant.options)
        if variant.moe is None:
            return build_model(self.run_config.model, options, MoEConfig(), self.run_config.seed)
        moe = MoEConfig(**{**asdict(self.run_config.moe), **variant.moe}).validate()
        if variant.from_backbone:
            return Model.from_backbone(self.backbone(), moe, self.run_config.seed)
        return build_model(self.run_config.model, options, moe, self.run_config.seed)

    def run_variant(self, variant):
        start = time.perf_counter()
        try:
            if variant.name == "qga" and self._backbone is not None:
                model = self._backbone
            else:
                model = self._fit(self.build(variant))
                if variant.name == "qga":
                    self._backbone = model
            optim = self.run_config.optim
            records = evaluate(model, self.eval_samples, optim.eval_batch_size, optim.eval_workers)
            recall, _ = recall_at_precision(records, 0.9)
            row = AblationRow(
                variant=variant.name,
                status="ok",
                accuracy=sum(r.correct for r in records) / len(records),
                recall_at_90=recall,
                params_trained=model.parameter_count(trainable_only=True),
                alpha_image=_mean_alpha(records, "image"),
                alpha_context=_mean_alpha(records, "context"),
            )
        except Exception as e:
            logger.warning(f"Variant {variant.name} failed: {e}")
            row = AblationRow(variant=variant.name, status=f"failed: {e}")
        row.wall_time = time.perf_counter() - start
        logger.info(f"Variant {variant.name}: {row.status}, accuracy {row.accuracy:.4f}, R@90 {row.recall_at_90:.4f}")
        return row

    def run(self, variants, reproduce=None):
        """
        Run every variant in order; a failed variant is recorded and the grid continues.

        Args:
            variants (list): Variants to run
            reproduce (str): Optional variant name re-run in isolation afterwards

        Returns:
            AblationResult: one row per variant plus the reproducibility verdict
        """
        rows = [self.run_variant(v) for v in variants]
        result = AblationResult(rows=rows)
        if reproduce:
            target = next((v for v in variants if v.name == reproduce), None)
            if target is None:
                raise ValueError(f"cannot reproduce {reproduce!r}: it is not part of this grid")
            first = next(r for r in rows if r.variant == reproduce)
            rerun = AblationRunner(self.run_config, self.train_samples, self.eval_samples).run_variant(target)
            result.reproduced = reproduce
            result.reproducible = (
                first.status == rerun.status == "ok"
                and first.accuracy == rerun.accuracy
                and first.recall_at_90 == rerun.recall_at_90
            )
            logger.info(f"Re-run of {reproduce}: {'identical' if result.reproducible else 'DIFFERENT'}")
        return result


def write_ablation_csv(result, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for row in result.rows:
            writer.writerow(row.as_list())


def format_ablation_table(result):
    cells = [ABLATION_COLUMNS] + [[str(c) for c in row.as_list()] for row in result.rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(ABLATION_COLUMNS))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    if result.reproduced:
        lines.append(f"reproducibility re-run of {result.reproduced}: {'pass' if result.reproducible else 'FAIL'}")
    return "\n".join(lines)
