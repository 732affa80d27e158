"""Hand-off primitives between the inference and learner threads."""
from __future__ import annotations

import threading
from collections import deque


class DropOldestQueue:
    """Bounded single-producer/single-consumer queue.

    ``put`` never blocks: at capacity the oldest item is discarded and
    counted in ``dropped``.
    """

    def __init__(self, maxsize: int = 8):
        if maxsize < 1:
            raise ValueError("maxsize must be >= 1")
        self._dq = deque()
        self._maxsize = maxsize
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0
        self.put_count = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._dq) >= self._maxsize:
                self._dq.popleft()
                self.dropped += 1
            self._dq.append(item)
            self.put_count += 1
            self._cond.notify()

    def get(self, timeout=None):
        """Next item, or None once closed and drained (or on timeout)."""
        with self._cond:
            while not self._dq and not self._closed:
                if not self._cond.wait(timeout):
                    return None
            if self._dq:
                return self._dq.popleft()
            return None

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._dq)


class SnapshotSlot:
    """Single slot holding the latest published parameters.

    Each publication stores the value together with its version and content
    digest; :meth:`read` re-checks both so a torn read would be detected.
    """

    def __init__(self, params):
        self._lock = threading.Lock()
        self._entry = (params.version, params.digest(), params)
        self.torn_reads = 0
        self.reads = 0
        self.publications = 0

    def publish(self, params) -> None:
        entry = (params.version, params.digest(), params)
        with self._lock:
            if entry[0] < self._entry[0]:
                raise ValueError("published versions must not decrease")
            self._entry = entry
            self.publications += 1

    def read(self, verify: bool = True):
        with self._lock:
            version, digest, params = self._entry
        self.reads += 1
        if verify and (params.version != version or params.digest() != digest):
            self.torn_reads += 1
        return params

    @property
    def version(self) -> int:
        with self._lock:
            return self._entry[0]
