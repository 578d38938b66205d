"""
JSON Lines loggers for training metrics and operational events.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Dict, Any, Optional, Union
from utils.paths import get_log_dir


class MetricsLogger:
    """
    Writes the training metrics stream: one JSON object per step and per epoch.

    Records carry no timestamps so that two runs with the same seed produce
    byte-identical files.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def _write(self, record: Dict[str, Any]):
        self.records.append(record)
        if self.path is None:
            return
        try:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record) + '\n')
        except Exception as e:
            print(f"Warning: Could not write metrics record: {e}")

    def log_step(self, step: int, l_t: float, l_s: float, l_w: float, total: float, lr: float):
        self._write({"step": step, "l_t": l_t, "l_s": l_s, "l_w": l_w, "total": total, "lr": lr})

    def log_epoch(self, epoch: int, valid_bleu: float, valid_loss: float):
        self._write({"epoch": epoch, "valid_bleu": valid_bleu, "valid_loss": valid_loss})


class EventLogger:
    def __init__(self, log_dir: Optional[Union[str, Path]] = None):
        self.history_dir = Path(log_dir) if log_dir is not None else get_log_dir()
        self.history_dir.mkdir(parents=True, exist_ok=True)

    def log_event(self, event: str, **details: Any):
        """
        Log an operational event.

        Parameters:
        -----------
        event : str
            Event name, e.g. "step_skipped", "training_aborted", "cell_failed"
        details : dict
            JSON-serialisable event fields
        """
        log_entry = {
            "timestamp": datetime.now().isoformat(),
            "event": event,
            **details,
        }

        # Save to daily log file
        date_str = datetime.now().strftime("%Y-%m-%d")
        log_file = self.history_dir / f"events_{date_str}.jsonl"

        try:
            with open(log_file, 'a') as f:
                f.write(json.dumps(log_entry, default=str) + '\n')
        except Exception as e:
            print(f"Warning: Could not log event: {e}")

    def get_history(self, date: Optional[str] = None, event: Optional[str] = None):
        """
        Retrieve logged events.

        Parameters:
        -----------
        date : str, optional
            Date in YYYY-MM-DD format. If None, uses today.
        event : str, optional
            Filter by event name. If None, returns all events.

        Returns:
        --------
        list
            List of log entries
        """
        if date is None:
            date = datetime.now().strftime("%Y-%m-%d")

        log_file = self.history_dir / f"events_{date}.jsonl"

        if not log_file.exists():
            return []

        entries = []
        try:
            with open(log_file, 'r') as f:
                for line in f:
                    entry = json.loads(line.strip())
                    if event is None or entry.get('event') == event:
                        entries.append(entry)
        except Exception as e:
            print(f"Warning: Could not read event history: {e}")

        return entries

    def get_stats(self, date: Optional[str] = None):
        """Count events per name for a day."""
        entries = self.get_history(date)
        counts = {}
        for entry in entries:
            name = entry.get('event', 'unknown')
            counts[name] = counts.get(name, 0) + 1
        return {"total_events": len(entries), "events": counts}


# Global event logger instance
_event_logger_instance = None

def get_event_logger():
    """Get or create the global event logger instance."""
    global _event_logger_instance
    if _event_logger_instance is None:
        _event_logger_instance = EventLogger()
    return _event_logger_instance
