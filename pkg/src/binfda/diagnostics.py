"""Process-wide counters for numerical events (clamps, ridges, fallbacks).

Numerical routines never fail on these events; they record them here and
carry on. Callers that care take a snapshot before and after a computation.
"""

import threading
from collections import Counter

_lock = threading.Lock()
_counts: Counter = Counter()


def record(event: str, n: int = 1) -> None:
    if n <= 0:
        return
    with _lock:
        _counts[event] += int(n)


def snapshot() -> dict:
    with _lock:
        return dict(_counts)


def reset() -> None:
    with _lock:
        _counts.clear()
