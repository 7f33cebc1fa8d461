"""Shared filename helpers for run and cache artifacts."""

import re

CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.jsonl"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.json"
EXPLANATION_FILE = "explanations.json"
COUPLING_CSV_FILE = "coupling_summary.csv"
EMBEDDINGS_FILE = "embeddings.tsv"
FILTER_STATS_FILE = "filter_stats.json"


def sanitize_filename(name: str) -> str | None:
    """Sanitize a string into a filesystem-safe filename."""
    name = re.sub(r"[^a-z0-9.-]", "-", name.lower())
    name = re.sub(r"-+", "-", name).strip("-.")
    return name[:60] if name else None


def run_name(dataset: str, mode: str, split_seed: int, seed: int) -> str:
    """Directory name of one training run, e.g. ``cora-attention-s0-w0``."""
    base = sanitize_filename(f"{dataset}-{mode}") or "run"
    return f"{base}-s{split_seed}-w{seed}"


def hop_filter_name(hop: int) -> str:
    return f"hop{hop}.txt"


def ppr_filter_name() -> str:
    return "ppr.txt"


def history_file_name(split_seed: int, seed: int) -> str:
    """Per-run history inside a protocol directory, e.g. ``history-s0-w3.jsonl``."""
    return f"history-s{split_seed}-w{seed}.jsonl"


def value_slug(value) -> str:
    """Filesystem-safe tag for one sweep value."""
    return sanitize_filename(str(value)) or "value"
