#!/usr/bin/env python3
"""
Instrumented byte counter for transient buffers

Every intermediate array the trainer or the kNN engine allocates is
registered here, so peak working sets can be asserted in tests without
a profiler.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class MemoryReport:
    """Snapshot of an accountant"""
    peak_bytes: int
    current_bytes: int
    allocations: int


class BufferAccountant:
    """Thread-safe tally of live transient buffers and their peak"""

    def __init__(self, name: str = 'buffers'):
        self.name = name
        self._lock = threading.Lock()
        self._live: Dict[int, int] = {}
        self._next_handle = 0
        self.current_bytes = 0
        self.peak_bytes = 0
        self.allocations = 0

    def allocate(self, nbytes: int) -> int:
        """Register a buffer of nbytes; returns a handle for release()"""
        with self._lock:
            handle = self._next_handle
            self._next_handle += 1
            self._live[handle] = int(nbytes)
            self.current_bytes += int(nbytes)
            self.allocations += 1
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes
            return handle

    def track(self, array: np.ndarray) -> int:
        return self.allocate(array.nbytes)

    def release(self, handle: int) -> None:
        with self._lock:
            self.current_bytes -= self._live.pop(handle)

    @contextmanager
    def scope(self) -> Iterator['BufferScope']:
        """Release everything tracked inside the block on exit"""
        scope = BufferScope(self)
        try:
            yield scope
        finally:
            scope.close()

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.current_bytes

    def report(self) -> MemoryReport:
        with self._lock:
            return MemoryReport(self.peak_bytes, self.current_bytes, self.allocations)


class BufferScope:
    """Group of buffers released together"""

    def __init__(self, accountant: BufferAccountant):
        self.accountant = accountant
        self._handles = []

    def track(self, array: np.ndarray) -> np.ndarray:
        self._handles.append(self.accountant.track(array))
        return array

    def reserve(self, nbytes: int) -> None:
        self._handles.append(self.accountant.allocate(nbytes))

    def close(self) -> None:
        while self._handles:
            self.accountant.release(self._handles.pop())
