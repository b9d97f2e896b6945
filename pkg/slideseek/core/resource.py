"""端点并发占用管理

每个模型端点一个计数槽位，超过上限的调用阻塞等待，避免触发服务端限流。
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass

logger = logging.getLogger(__name__)


@dataclass
class EndpointStatus:
    """端点占用快照"""

    endpoint: str = ""
    capacity: int = 0
    in_use: int = 0
    peak: int = 0
    timestamp: float = 0.0


class _Slot:
    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.cond = threading.Condition()
        self.in_use = 0
        self.peak = 0


class ConcurrencyLimiter:
    """按端点限制并发请求数"""

    def __init__(self, capacity: int = 4) -> None:
        self.capacity = max(1, capacity)
        self._lock = threading.Lock()
        self._slots: dict[str, _Slot] = {}

    def _slot(self, endpoint: str) -> _Slot:
        with self._lock:
            if endpoint not in self._slots:
                self._slots[endpoint] = _Slot(self.capacity)
            return self._slots[endpoint]

    def acquire(self, endpoint: str) -> None:
        slot = self._slot(endpoint)
        with slot.cond:
            if slot.in_use >= slot.capacity:
                logger.debug("端点繁忙，等待: %s (%d/%d)", endpoint, slot.in_use, slot.capacity)
            slot.cond.wait_for(lambda: slot.in_use < slot.capacity)
            slot.in_use += 1
            slot.peak = max(slot.peak, slot.in_use)

    def release(self, endpoint: str) -> None:
        slot = self._slot(endpoint)
        with slot.cond:
            slot.in_use = max(0, slot.in_use - 1)
            slot.cond.notify()

    @contextmanager
    def hold(self, endpoint: str) -> Iterator[None]:
        self.acquire(endpoint)
        try:
            yield
        finally:
            self.release(endpoint)

    def status(self, endpoint: str) -> EndpointStatus:
        slot = self._slot(endpoint)
        with slot.cond:
            return EndpointStatus(
                endpoint=endpoint,
                capacity=slot.capacity,
                in_use=slot.in_use,
                peak=slot.peak,
                timestamp=time.time(),
            )
