"""
Utility module for managing persistent storage paths.
Centralizes path configuration for corpora, checkpoints, logs, outputs and the teacher cache.
"""

import os
from pathlib import Path

from errors import ConfigError


def get_data_dir():
    """Get the corpus directory path."""
    return Path(os.getenv("APT_DATA_DIR", "data/corpus"))


def get_checkpoint_dir():
    """Get the checkpoint directory path."""
    checkpoint_dir = Path(os.getenv("APT_CHECKPOINT_DIR", "data/checkpoints"))
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    return checkpoint_dir


def get_log_dir():
    """Get the logs directory path."""
    log_dir = Path(os.getenv("APT_LOG_DIR", "data/logs"))
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir


def get_output_dir():
    """Get the experiment outputs directory path."""
    output_dir = Path(os.getenv("APT_OUTPUT_DIR", "data/outputs"))
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def get_cache_dir():
    """Get the teacher-output cache directory path."""
    return Path(os.getenv("APT_CACHE_DIR", ".teacher_cache"))


def get_thread_count():
    """Worker count from APT_THREADS (default 1)."""
    raw = os.getenv("APT_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"APT_THREADS must be an integer, got {raw!r}")
    if threads < 1:
        raise ConfigError(f"APT_THREADS must be >= 1, got {threads}")
    return threads


def ensure_directories():
    """Ensure all required directories exist."""
    get_data_dir().mkdir(parents=True, exist_ok=True)
    get_checkpoint_dir().mkdir(parents=True, exist_ok=True)
    get_log_dir().mkdir(parents=True, exist_ok=True)
    get_output_dir().mkdir(parents=True, exist_ok=True)
    get_cache_dir().mkdir(parents=True, exist_ok=True)
