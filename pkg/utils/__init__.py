"""
Utility modules for the APT translation stack.
"""

from .paths import (
    get_data_dir,
    get_checkpoint_dir,
    get_log_dir,
    get_output_dir,
    get_cache_dir,
    get_thread_count,
    ensure_directories
)

from .run_logger import get_event_logger, EventLogger, MetricsLogger

__all__ = [
    'get_data_dir',
    'get_checkpoint_dir',
    'get_log_dir',
    'get_output_dir',
    'get_cache_dir',
    'get_thread_count',
    'ensure_directories',
    'get_event_logger',
    'EventLogger',
    'MetricsLogger',
]
