"""
Reference Log-Probability Cache
LRU cache of frozen-model sequence log-probabilities with hit/miss statistics
"""
import logging
from threading import RLock
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

from cachetools import LRUCache

from model import ModelWeights, sequence_logprob

logger = logging.getLogger(__name__)

CacheKey = Tuple[str, Tuple[int, ...], Tuple[int, ...], bool]


class LogprobCache:
    """
    Memoizes log pi_0(answer | prompt) for frozen weights.

    Entries are keyed by the weights fingerprint, so one cache can be shared
    by every tau and head set of a seed without serving stale values after
    the base model changes.
    """

    def __init__(self, max_size: int = 4096):
        """
        Args:
            max_size: Maximum number of cached log-probabilities
        """
        self.max_size = max_size
        self.cache: LRUCache = LRUCache(maxsize=max_size)
        self.lock = RLock()
        self._hits = 0
        self._misses = 0

    @staticmethod
    def _key(fingerprint: str, prompt: Sequence[int], answer: Sequence[int], edit_prompt: bool) -> CacheKey:
        return (fingerprint, tuple(int(t) for t in prompt), tuple(int(t) for t in answer), edit_prompt)

    def get_or_compute(self, key: Hashable, compute: Callable[[], Any]) -> Any:
        with self.lock:
            if key in self.cache:
                self._hits += 1
                return self.cache[key]
            self._misses += 1
        value = compute()
        with self.lock:
            self.cache[key] = value
        return value

    def logprob(
        self,
        weights: ModelWeights,
        prompt: Sequence[int],
        answer: Sequence[int],
        edit_prompt: bool = True,
        fingerprint: Optional[str] = None,
    ) -> float:
        """
        Cached sequence_logprob without an editor

        Args:
            fingerprint: weights.fingerprint(), when the caller already has it
        """
        key = self._key(fingerprint or weights.fingerprint(), prompt, answer, edit_prompt)
        return self.get_or_compute(key, lambda: sequence_logprob(weights, prompt, answer, None, edit_prompt))

    def logprobs(
        self,
        weights: ModelWeights,
        items: Sequence[Tuple[Sequence[int], Sequence[int]]],
        edit_prompt: bool = True,
    ) -> List[float]:
        """Cached log-probabilities for (prompt, answer) items, hashing the weights once"""
        fingerprint = weights.fingerprint()
        return [self.logprob(weights, p, a, edit_prompt, fingerprint) for p, a in items]

    def peek(self, weights: ModelWeights, prompt: Sequence[int], answer: Sequence[int],
             edit_prompt: bool = True) -> Optional[float]:
        with self.lock:
            return self.cache.get(self._key(weights.fingerprint(), prompt, answer, edit_prompt))

    def clear(self) -> None:
        with self.lock:
            self.cache.clear()
            self._hits = 0
            self._misses = 0
            logger.debug("Logprob cache cleared")

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics"""
        with self.lock:
            total_requests = self._hits + self._misses
            hit_rate = (self._hits / total_requests * 100) if total_requests > 0 else 0
            return {
                "size": len(self.cache),
                "max_size": self.max_size,
                "hits": self._hits,
                "misses": self._misses,
                "hit_rate": round(hit_rate, 2),
                "total_requests": total_requests,
            }
