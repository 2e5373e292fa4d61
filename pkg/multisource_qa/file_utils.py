"""
File utility functions for the multi-source QA toolkit.
"""
import os
import re
import logging

from multisource_qa.config import (
    ABLATION_REPORT_FILENAME,
    ATTRIBUTE_REPORT_FILENAME,
    CHECKPOINT_PATTERN,
    FINAL_CHECKPOINT_FILENAME,
    SOURCE_REPORT_FILENAME,
    SPLIT_FILENAMES,
    TRAINING_LOG_FILENAME,
)

logger = logging.getLogger("multisource_qa.file_utils")

_CHECKPOINT_RE = re.compile(r"^checkpoint_epoch(\d+)\.ckpt$")


class RunDirectory:
    """
    Resolves every file a run reads or writes under one output directory:
    the training log, per-epoch and final checkpoints, and report files.
    """

    def __init__(self, out_dir):
        self.out_dir = os.path.abspath(out_dir)

    def ensure(self):
        """Create the directory if needed and return its path."""
        os.makedirs(self.out_dir, exist_ok=True)
        return self.out_dir

    def path(self, filename):
        return os.path.join(self.out_dir, filename)

    @property
    def log_path(self):
        return self.path(TRAINING_LOG_FILENAME)

    @property
    def final_checkpoint(self):
        return self.path(FINAL_CHECKPOINT_FILENAME)

    def checkpoint_path(self, epoch):
        return self.path(CHECKPOINT_PATTERN.format(epoch=epoch))

    def report_paths(self, kind):
        """
        CSV and text paths for a report.

        Args:
            kind (str): "attributes", "sources" or "ablation"

        Returns:
            tuple: (csv_path, text_path)
        """
        names = {
            "attributes": ATTRIBUTE_REPORT_FILENAME,
            "sources": SOURCE_REPORT_FILENAME,
            "ablation": ABLATION_REPORT_FILENAME,
        }
        if kind not in names:
            raise ValueError(f"unknown report kind {kind!r}")
        csv_path = self.path(names[kind])
        return csv_path, os.path.splitext(csv_path)[0] + ".txt"

    def epoch_checkpoints(self):
        """``(epoch, path)`` for every per-epoch checkpoint, oldest first."""
        if not os.path.isdir(self.out_dir):
            return []
        found = []
        for name in os.listdir(self.out_dir):
            match = _CHECKPOINT_RE.match(name)
            if match:
                found.append((int(match.group(1)), self.path(name)))
        return sorted(found)

    def latest_checkpoint(self):
        """The newest per-epoch checkpoint, or None."""
        checkpoints = self.epoch_checkpoints()
        if not checkpoints:
            logger.debug(f"No epoch checkpoints in {self.out_dir}")
            return None
        return checkpoints[-1][1]

    def write_text(self, filename, text):
        target = self.path(filename) if not os.path.isabs(filename) else filename
        with open(target, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
        return target


def dataset_path(dataset, split):
    """
    Resolve the file holding ``split`` of a dataset.

    Args:
        dataset (str): A dataset directory, or a single dataset file
        split (str): "train", "val" or "test"

    Returns:
        str: Path to the split file
    """
    if os.path.isfile(dataset):
        return dataset
    if split not in SPLIT_FILENAMES:
        raise ValueError(f"unknown split {split!r}")
    path = os.path.join(dataset, SPLIT_FILENAMES[split])
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset split {split} not found at {path}")
    return path
