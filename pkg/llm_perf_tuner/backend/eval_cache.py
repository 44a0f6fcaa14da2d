"""
Evaluation cache
LRU cache of cost-model evaluations shared by the tuner's worker threads
"""
import threading
from collections import OrderedDict

from .config import Config


class EvalCache:
    """Thread-safe LRU cache keyed on hashable candidate descriptions"""

    def __init__(self, max_size=None):
        """
        Initialize evaluation cache

        Args:
            max_size: Maximum number of cached evaluations
        """
        self.max_size = max_size or Config.EVAL_CACHE_SIZE
        self.cache = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get(self, key):
        """
        Get a cached evaluation

        Args:
            key: Cache key

        Returns:
            Cached value or None
        """
        with self._lock:
            if key not in self.cache:
                self.misses += 1
                return None
            self.cache.move_to_end(key)
            self.hits += 1
            return self.cache[key]

    def set(self, key, value):
        with self._lock:
            if key in self.cache:
                self.cache.move_to_end(key)
            self.cache[key] = value
            if len(self.cache) > self.max_size:
                self.cache.popitem(last=False)

    def get_or_compute(self, key, compute):
        """Cached value for key, computing and storing it on a miss"""
        value = self.get(key)
        if value is None:
            value = compute()
            self.set(key, value)
        return value

    def clear(self):
        with self._lock:
            self.cache.clear()
            self.hits = 0
            self.misses = 0

    def get_stats(self):
        """Get cache statistics"""
        total_requests = self.hits + self.misses
        hit_rate = (self.hits / total_requests * 100) if total_requests > 0 else 0
        return {
            'size': len(self.cache),
            'max_size': self.max_size,
            'hits': self.hits,
            'misses': self.misses,
            'hit_rate': round(hit_rate, 2),
        }
