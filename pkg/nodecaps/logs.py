"""Logging setup for the command line.

Library modules only create ``logging.getLogger(__name__)`` loggers; this
module attaches handlers to the ``nodecaps`` logger when the CLI starts.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

from .config import LOG_DIR

LOG_FILE_NAME = "nodecaps.log"
MAX_LOG_BYTES = 5 * 1024 * 1024  # 5 MB
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _rotate_if_needed(path: Path) -> None:
    """Rotate log file if it exceeds MAX_LOG_BYTES. Keeps one backup."""
    try:
        if path.exists() and path.stat().st_size > MAX_LOG_BYTES:
            backup = path.with_suffix(path.suffix + ".1")
            if backup.exists():
                backup.unlink()
            path.rename(backup)
    except OSError:
        pass


def setup_logging(verbose: bool = False, log_dir: Path | None = None) -> logging.Logger:
    """Send warnings (or everything with ``verbose``) to stderr and all records to a file."""
    logger = logging.getLogger("nodecaps")
    logger.setLevel(logging.DEBUG)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.DEBUG if verbose else logging.WARNING)
    stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(stream)

    log_file = Path(log_dir or LOG_DIR) / LOG_FILE_NAME
    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        _rotate_if_needed(log_file)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
    except OSError as exc:
        logger.warning("cannot write log file %s: %s", log_file, exc)
    else:
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger
