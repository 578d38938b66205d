"""
Thread-safe registry of experiment cells (ablation rows, experiment runs).

A failing cell is recorded with its error while the suite carries on.
"""
import threading
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional


class CellStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Cell:
    def __init__(self, name: str, suite: str, params: Optional[dict] = None):
        self.name = name
        self.suite = suite
        self.params = params or {}
        self.status = CellStatus.PENDING
        self.progress = 0.0  # 0.0 to 1.0
        self.current_stage = ""
        self.result: Optional[dict] = None
        self.error: Optional[str] = None
        self.error_code: Optional[str] = None
        self.created_at = datetime.now()
        self.updated_at = datetime.now()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "suite": self.suite,
            "status": self.status.value,
            "progress": self.progress,
            "stage": self.current_stage,
            "result": self.result,
            "error": self.error,
            "error_code": self.error_code,
        }


class RunTracker:
    def __init__(self):
        self._cells: Dict[str, Cell] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(suite: str, name: str) -> str:
        return f"{suite}/{name}"

    def register(self, suite: str, name: str, params: Optional[dict] = None) -> Cell:
        """Create (or reset) a pending cell"""
        cell = Cell(name, suite, params)
        with self._lock:
            self._cells[self._key(suite, name)] = cell
        return cell

    def get(self, suite: str, name: str) -> Optional[Cell]:
        with self._lock:
            return self._cells.get(self._key(suite, name))

    def cells(self, suite: Optional[str] = None) -> List[Cell]:
        """Cells in registration order, optionally for one suite"""
        with self._lock:
            return [c for c in self._cells.values() if suite is None or c.suite == suite]

    def update_progress(self, suite: str, name: str, progress: float, stage: str = ""):
        with self._lock:
            cell = self._cells.get(self._key(suite, name))
            if cell:
                cell.progress = max(0.0, min(1.0, progress))
                cell.current_stage = stage
                cell.updated_at = datetime.now()

    def set_status(self, suite: str, name: str, status: CellStatus, result: Optional[dict] = None,
                   error: Optional[str] = None, error_code: Optional[str] = None):
        with self._lock:
            cell = self._cells.get(self._key(suite, name))
            if cell:
                cell.status = status
                cell.result = result
                cell.error = error
                cell.error_code = error_code
                cell.updated_at = datetime.now()
                if status == CellStatus.COMPLETED:
                    cell.progress = 1.0

    def summary(self, suite: Optional[str] = None) -> Dict[str, int]:
        counts = {status.value: 0 for status in CellStatus}
        for cell in self.cells(suite):
            counts[cell.status.value] += 1
        return counts

    def clear(self, suite: Optional[str] = None) -> int:
        with self._lock:
            doomed = [k for k, c in self._cells.items() if suite is None or c.suite == suite]
            for key in doomed:
                del self._cells[key]
        return len(doomed)


# Global tracker instance
_run_tracker = None


def get_run_tracker() -> RunTracker:
    global _run_tracker
    if _run_tracker is None:
        _run_tracker = RunTracker()
    return _run_tracker
