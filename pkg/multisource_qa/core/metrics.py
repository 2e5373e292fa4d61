"""
Exact-match accuracy, recall at a precision floor, and grouped reports.
"""
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List

from multisource_qa.core.encoders import EOS_ID, PAD_ID

logger = logging.getLogger("multisource_qa.core.metrics")

NO_THRESHOLD = math.inf
REPORT_COLUMNS = ["attribute", "n", "accuracy", "recall_at_90", "threshold"]


def strip_special(tokens):
    """Drop PAD tokens and everything from the first EOS on."""
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS_ID:
            break
        if t != PAD_ID:
            out.append(t)
    return out


@dataclass
class PredictionRecord:
    predicted: List[int]
    confidence: float
    gold: List[int]
    attribute_id: int
    source_label: str
    alpha_mean: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and self.confidence > 0):
            raise ValueError(f"confidence must be finite and positive, got {self.confidence}")

    @property
    def correct(self):
        return strip_special(self.predicted) == strip_special(self.gold)


@dataclass
class ReportRow:
    attribute: str
    n: int
    accuracy: float
    recall_at_90: float
    threshold: float

    def as_list(self):
        threshold = "" if math.isinf(self.threshold) else f"{self.threshold:.6f}"
        return [self.attribute, self.n, f"{self.accuracy:.4f}", f"{self.recall_at_90:.4f}", threshold]


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)
    mean: ReportRow = None


def _require_records(records, what):
    if not records:
        raise ValueError(f"{what} needs at least one prediction record")


def accuracy(records):
    """Fraction of records whose prediction matches the gold answer exactly."""
    _require_records(records, "accuracy")
    return sum(1 for r in records if r.correct) / len(records)


def recall_at_precision(records, p_min=0.90):
    """
    Highest recall over confidence thresholds whose precision is at least ``p_min``.

    Only observed confidences are candidate thresholds. When several
    thresholds reach the same recall the largest one is returned.

    Args:
        records (list): PredictionRecords
        p_min (float): Precision floor

    Returns:
        tuple: (recall, threshold); ``(0.0, inf)`` when no threshold qualifies
    """
    _require_records(records, "recall_at_precision")
    ranked = sorted(records, key=lambda r: -r.confidence)
    total = len(ranked)
    best_recall, best_threshold = 0.0, NO_THRESHOLD
    answered = correct = 0
    for i, record in enumerate(ranked):
        answered += 1
        correct += record.correct
        # evaluate only once every record tied at this confidence is answered
        if i + 1 < total and ranked[i + 1].confidence == record.confidence:
            continue
        if correct / answered >= p_min and correct / total > best_recall:
            best_recall, best_threshold = correct / total, record.confidence
    return best_recall, best_threshold


def _row(label, records, p_min):
    recall, threshold = recall_at_precision(records, p_min)
    return ReportRow(str(label), len(records), accuracy(records), recall, threshold)


def _grouped_report(records, key, p_min):
    groups = {}
    for r in records:
        groups.setdefault(key(r), []).append(r)
    rows = [_row(label, groups[label], p_min) for label in sorted(groups)]
    mean = ReportRow(
        "mean",
        len(records),
        sum(r.accuracy for r in rows) / len(rows),
        sum(r.recall_at_90 for r in rows) / len(rows),
        NO_THRESHOLD,
    )
    return Report(rows=rows, mean=mean)


def per_attribute_report(records, p_min=0.90):
    """One row per attribute id plus a macro-average row."""
    _require_records(records, "per_attribute_report")
    return _grouped_report(records, lambda r: r.attribute_id, p_min)


def per_source_report(records, p_min=0.90):
    """One row per source label plus a macro-average row."""
    _require_records(records, "per_source_report")
    return _grouped_report(records, lambda r: r.source_label, p_min)


def top_k_attribute_recall(records, ks=(5, 10, 15), p_min=0.90):
    """Mean recall over the K most frequent attributes, for each K."""
    _require_records(records, "top_k_attribute_recall")
    counts = Counter(r.attribute_id for r in records)
    ranked = sorted(counts, key=lambda a: (-counts[a], a))
    result = {}
    for k in ks:
        chosen = ranked[:k]
        recalls = [recall_at_precision([r for r in records if r.attribute_id == a], p_min)[0] for a in chosen]
        result[k] = sum(recalls) / len(recalls)
    return result


def write_report_csv(report, path):
    """
    Write a report as CSV.

    Args:
        report (Report): Rows plus the macro-average row
        path (str): Output CSV path
    """
    with open(path, "w", newline="") as report_file:
        writer = csv.writer(report_file)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow(row.as_list())
        if report.mean is not None:
            writer.writerow(report.mean.as_list())
    logger.debug(f"Wrote {len(report.rows)} report rows to {path}")


def format_report_table(report, title=None):
    """Aligned plain-text rendering of a report."""
    rows = [row.as_list() for row in report.rows]
    if report.mean is not None:
        rows.append(report.mean.as_list())
    cells = [REPORT_COLUMNS] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = [title] if title else []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
