"""
Configuration management for the multi-source QA toolkit.
"""
import os
import json
import logging
from dataclasses import asdict, dataclass, field, fields

from multisource_qa.core.blocks import BlockConfig
from multisource_qa.core.model import ModelOptions
from multisource_qa.core.moe import MoEConfig
from multisource_qa.core.synth import SynthConfig
from multisource_qa.core.trainer import OptimConfig

logger = logging.getLogger("multisource_qa.config")

# Base paths
CURRENT_DIR = os.getcwd()
DATA_DIR = os.environ.get("MSQA_DATA_DIR", CURRENT_DIR)

# Default filenames
TRAIN_FILENAME = "train.jsonl"
VAL_FILENAME = "val.jsonl"
TEST_FILENAME = "test.jsonl"
SPLIT_FILENAMES = {"train": TRAIN_FILENAME, "val": VAL_FILENAME, "test": TEST_FILENAME}
TRAINING_LOG_FILENAME = "train_log.jsonl"
FINAL_CHECKPOINT_FILENAME = "model.ckpt"
CHECKPOINT_PATTERN = "checkpoint_epoch{epoch:03d}.ckpt"
ATTRIBUTE_REPORT_FILENAME = "report_attributes.csv"
SOURCE_REPORT_FILENAME = "report_sources.csv"
ABLATION_REPORT_FILENAME = "ablation.csv"

# Default directories
DEFAULT_DATASET_DIR = os.environ.get("MSQA_DATASET_DIR", os.path.join(DATA_DIR, "data"))
DEFAULT_OUT_DIR = os.environ.get("MSQA_OUT_DIR", os.path.join(DATA_DIR, "runs", "default"))

# Evaluation fan-out
DEFAULT_EVAL_WORKERS = int(os.environ.get("MSQA_EVAL_WORKERS", "1"))

SECTIONS = {"model": BlockConfig, "options": ModelOptions, "moe": MoEConfig, "optim": OptimConfig}
TOP_LEVEL_KEYS = ("seed", "dataset", "out_dir")


@dataclass
class RunConfig:
    """Every hyperparameter of a run; serialized as flat dotted keys."""
    model: BlockConfig = field(default_factory=BlockConfig)
    options: ModelOptions = field(default_factory=ModelOptions)
    moe: MoEConfig = field(default_factory=MoEConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(eval_workers=DEFAULT_EVAL_WORKERS))
    seed: int = 0
    dataset: str = DEFAULT_DATASET_DIR
    out_dir: str = DEFAULT_OUT_DIR

    def validate(self):
        self.model.validate()
        self.options.validate()
        self.moe.validate()
        self.optim.validate()
        return self

    def to_flat(self):
        flat = {}
        for section in SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                flat[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        for key in TOP_LEVEL_KEYS:
            flat[key] = getattr(self, key)
        return flat

    @classmethod
    def from_flat(cls, flat):
        """
        Build a RunConfig from dotted keys; ``moe.placement.site`` is accepted for ``moe.site``.

        Raises:
            ValueError: on unknown keys
        """
        parts = {section: {} for section in SECTIONS}
        top = {}
        unknown = []
        for key, value in flat.items():
            if key in TOP_LEVEL_KEYS:
                top[key] = value
                continue
            path = key.split(".")
            if len(path) == 3 and path[0] == "moe" and path[1] == "placement":
                path = ["moe", path[2]]
            section_cls = SECTIONS.get(path[0])
            if len(path) != 2 or section_cls is None or path[1] not in {f.name for f in fields(section_cls)}:
                unknown.append(key)
                continue
            parts[path[0]][path[1]] = value
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        sections = {name: SECTIONS[name](**values) for name, values in parts.items()}
        return cls(**sections, **top).validate()


def _read_json_object(config_path):
    with open(config_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{config_path} must hold a JSON object")
    return data


def load_run_config(config_path=None):
    """
    Load a run configuration from a flat JSON file.

    Args:
        config_path (str, optional): Path to the config file; defaults when None

    Returns:
        RunConfig: The validated configuration
    """
    if not config_path:
        return RunConfig().validate()
    cfg = RunConfig.from_flat(_read_json_object(config_path))
    logger.debug(f"Loaded run config from {config_path}")
    return cfg


def apply_overrides(cfg, seed=None, dataset=None, out_dir=None):
    """Command-line flags win over the config file."""
    if seed is not None:
        cfg.seed = seed
    if dataset:
        cfg.dataset = dataset
    if out_dir:
        cfg.out_dir = out_dir
    return cfg


def load_synth_config(config_path=None):
    """Load a SynthConfig from a flat JSON file, or the defaults."""
    if not config_path:
        return SynthConfig().validate()
    return SynthConfig.from_dict(_read_json_object(config_path)).validate()


def save_config(flat, config_path):
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(flat, f, indent=2, sort_keys=True)

