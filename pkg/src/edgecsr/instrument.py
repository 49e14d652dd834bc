"""Per-thread accounting of buffer memory held by the build.

Three categories are tracked: resident stream blocks, message buffers and
sort chunks. Each thread keeps its own running total and peak; the peaks are
what the out-of-core budget checks read.
"""

import threading
from collections import defaultdict

CATEGORIES = ("block", "message", "sort")


class MemoryMeter:
    def __init__(self):
        self._lock = threading.Lock()
        self._current = defaultdict(int)
        self._peak = defaultdict(int)
        self._by_cat = defaultdict(lambda: defaultdict(int))

    @staticmethod
    def _who():
        return threading.current_thread().name

    def acquire(self, nbytes, category, who=None):
        who = who or self._who()
        with self._lock:
            self._current[who] += nbytes
            self._by_cat[who][category] += nbytes
            if self._current[who] > self._peak[who]:
                self._peak[who] = self._current[who]

    def release(self, nbytes, category, who=None):
        who = who or self._who()
        with self._lock:
            self._current[who] -= nbytes
            self._by_cat[who][category] -= nbytes

    def peaks(self):
        with self._lock:
            return dict(self._peak)

    def current(self):
        with self._lock:
            return {k: v for k, v in self._current.items() if v}

    def reset(self):
        with self._lock:
            self._current.clear()
            self._peak.clear()
            self._by_cat.clear()


class Holding:
    """A buffer registration that remembers its owning thread.

    Buffers may be released from a different thread than the one that
    allocated them (a message handed across a queue); the charge always goes
    back to the allocating thread.
    """

    __slots__ = ("nbytes", "category", "who", "meter")

    def __init__(self, meter, nbytes, category):
        self.meter = meter
        self.nbytes = nbytes
        self.category = category
        self.who = threading.current_thread().name
        meter.acquire(nbytes, category)

    def resize(self, nbytes):
        delta = nbytes - self.nbytes
        if delta > 0:
            self.meter.acquire(delta, self.category, self.who)
        elif delta < 0:
            self.meter.release(-delta, self.category, self.who)
        self.nbytes = nbytes

    def release(self):
        if self.nbytes:
            self.meter.release(self.nbytes, self.category, self.who)
            self.nbytes = 0


METER = MemoryMeter()
