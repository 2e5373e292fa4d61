"""
Utility functions for the multi-source QA toolkit.
"""
import hashlib
import logging

logger = logging.getLogger("multisource_qa.utils")


def format_count(n):
    """
    Format a parameter count into a human-readable form.

    Args:
        n (int): Number of values

    Returns:
        str: e.g. "734", "12.3K", "1.5M"
    """
    units = ["", "K", "M", "B"]
    size = float(n)
    idx = 0
    while size >= 1000 and idx < len(units) - 1:
        size /= 1000
        idx += 1
    return f"{int(size)}" if idx == 0 else f"{size:.1f}{units[idx]}"


def human_time(seconds):
    """Render a duration in seconds as ms, s, or minutes and seconds."""
    if seconds < 1:
        return f"{int(seconds * 1000)} ms"
    if seconds < 60:
        return f"{seconds:.2f} s"
    m = int(seconds // 60)
    return f"{m}m {seconds % 60:.1f}s"


def parameter_digests(model):
    """SHA-256 of every parameter's bytes, keyed by name."""
    return {p.name: hashlib.sha256(p.data.tobytes()).hexdigest() for p in model.parameters()}


def changed_parameters(before, after):
    """Names whose digest differs between two ``parameter_digests`` snapshots."""
    return sorted(name for name in before if before[name] != after.get(name))


def source_summary(counts):
    """One-line ``label=n`` summary of per-source sample counts."""
    return ", ".join(f"{label}={n}" for label, n in counts.items())
