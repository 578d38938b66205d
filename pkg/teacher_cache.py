"""
Teacher Output Cache

Frozen teachers are deterministic, so the per-layer representations and
per-position distributions they produce for a batch can be reused across
epochs instead of recomputed.
"""

import hashlib
import pickle
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from utils.paths import get_cache_dir


class TeacherOutputCache:
    def __init__(self, cache_dir=None, max_entries: int = 512, persist: bool = False):
        """
        Initialize the cache.

        Parameters:
        -----------
        cache_dir : str or Path, optional
            Directory for pickled entries when ``persist`` is set. If None,
            uses APT_CACHE_DIR (default ".teacher_cache")
        max_entries : int
            In-memory entry cap; the oldest entry is evicted first
        persist : bool
            Also write entries to ``cache_dir`` so later processes can reuse them
        """
        self.max_entries = max_entries
        self.persist = persist
        self.cache_dir = Path(cache_dir) if cache_dir is not None else get_cache_dir()
        self._memory: "OrderedDict[str, Any]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        self.cache_index_file = self.cache_dir / "cache_index.pkl"
        self.cache_index = {}
        if self.persist:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self.cache_index = self._load_index()

    def _load_index(self):
        if self.cache_index_file.exists():
            try:
                with open(self.cache_index_file, 'rb') as f:
                    return pickle.load(f)
            except Exception as e:
                print(f"Warning: Could not read cache index: {e}")
                return {}
        return {}

    def _save_index(self):
        try:
            with open(self.cache_index_file, 'wb') as f:
                pickle.dump(self.cache_index, f)
        except Exception as e:
            print(f"Warning: Could not save cache index: {e}")

    @staticmethod
    def _get_cache_key(fingerprint: str, output: str, mode: str, ids: np.ndarray) -> str:
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        digest = hashlib.md5(f"{fingerprint}_{output}_{mode}_{ids.shape}".encode())
        digest.update(ids.tobytes())
        return digest.hexdigest()

    def _get_cache_file(self, cache_key: str) -> Path:
        return self.cache_dir / f"{cache_key}.pkl"

    def get(self, fingerprint: str, output: str, mode: str, ids: np.ndarray):
        """Cached value for (teacher fingerprint, output kind, mode, ids), or None."""
        cache_key = self._get_cache_key(fingerprint, output, mode, ids)
        with self._lock:
            return self._lookup(cache_key)

    def _lookup(self, cache_key: str):
        if cache_key in self._memory:
            self._memory.move_to_end(cache_key)
            return self._memory[cache_key]
        if self.persist and cache_key in self.cache_index:
            cache_file = self._get_cache_file(cache_key)
            try:
                with open(cache_file, 'rb') as f:
                    value = pickle.load(f)
                self._remember(cache_key, value)
                return value
            except Exception as e:
                print(f"Warning: Could not load cache file {cache_file}: {e}")
                del self.cache_index[cache_key]
                self._save_index()
        return None

    def _remember(self, cache_key: str, value):
        self._memory[cache_key] = value
        self._memory.move_to_end(cache_key)
        while len(self._memory) > self.max_entries:
            self._memory.popitem(last=False)

    def put(self, fingerprint: str, output: str, mode: str, ids: np.ndarray, value):
        cache_key = self._get_cache_key(fingerprint, output, mode, ids)
        with self._lock:
            self._store(cache_key, fingerprint, output, mode, value)

    def _store(self, cache_key: str, fingerprint: str, output: str, mode: str, value):
        self._remember(cache_key, value)
        if not self.persist:
            return
        cache_file = self._get_cache_file(cache_key)
        try:
            with open(cache_file, 'wb') as f:
                pickle.dump(value, f)
            self.cache_index[cache_key] = {
                'fingerprint': fingerprint,
                'output': output,
                'mode': mode,
                'file_size': cache_file.stat().st_size,
            }
            self._save_index()
        except Exception as e:
            print(f"Warning: Could not save cache file {cache_file}: {e}")

    def fetch(self, fingerprint: str, output: str, mode: str, ids: np.ndarray, compute: Callable[[], Any]):
        """Return the cached value or compute, store and return it."""
        value = self.get(fingerprint, output, mode, ids)
        with self._lock:
            if value is not None:
                self.hits += 1
                return value
            self.misses += 1
        value = compute()
        self.put(fingerprint, output, mode, ids, value)
        return value

    def clear(self):
        with self._lock:
            self._clear()

    def _clear(self):
        self._memory.clear()
        self.hits = 0
        self.misses = 0
        if self.cache_dir.exists():
            for cache_key in list(self.cache_index.keys()):
                cache_file = self._get_cache_file(cache_key)
                if cache_file.exists():
                    cache_file.unlink()
            for stray in self.cache_dir.glob("*.pkl"):
                if stray != self.cache_index_file:
                    stray.unlink()
        self.cache_index = {}
        if self.persist:
            self._save_index()

    def get_stats(self):
        total_size = 0
        for cache_key in self.cache_index:
            cache_file = self._get_cache_file(cache_key)
            if cache_file.exists():
                total_size += cache_file.stat().st_size
        with self._lock:
            hits, misses = self.hits, self.misses
        lookups = hits + misses
        return {
            'memory_entries': len(self._memory),
            'disk_entries': len(self.cache_index),
            'hits': hits,
            'misses': misses,
            'hit_rate': hits / lookups if lookups else 0.0,
            'total_size_bytes': total_size,
            'total_size_mb': total_size / (1024 * 1024),
            'cache_dir': str(self.cache_dir),
        }


# Global cache instance
_cache_instance: Optional[TeacherOutputCache] = None


def get_cache(cache_dir=None, persist: bool = False) -> TeacherOutputCache:
    """Get or create the global teacher-output cache."""
    global _cache_instance
    if _cache_instance is None:
        _cache_instance = TeacherOutputCache(cache_dir, persist=persist)
    return _cache_instance
