"""Point-to-point message transport used by the distributed solvers.

The contract every implementation honours:

* ``send(src, dst, nbytes, deliver)`` queues a message; ``deliver`` is a
  zero-argument callback invoked exactly once at delivery time.
* Delivery order is FIFO per (src, dst) pair.
* Monitoring messages are never lost; an undeliverable destination raises
  TransportFailure.
* ``flush()`` drives deliveries until the queue is empty.

``InstantTransport`` delivers immediately in global FIFO order and is enough
for unit tests; the simulator provides a latency- and bandwidth-aware
implementation with the same surface.
"""

from __future__ import annotations

from collections import deque
from typing import Callable

from .errors import OvermonError

HEADER_BYTES = 24
REAL_BYTES = 8


class TransportFailure(OvermonError):
    """The transport could not accept or deliver a message."""


class InstantTransport:
    """In-memory FIFO transport with per-pair byte accounting."""

    def __init__(self, nodes=None):
        self.nodes = None if nodes is None else set(nodes)
        self.bytes_sent: dict[tuple[int, int], int] = {}
        self.messages_sent = 0
        self._queue: deque[Callable[[], None]] = deque()
        self._flushing = False

    def send(self, src: int, dst: int, nbytes: int, deliver: Callable[[], None]) -> None:
        if self.nodes is not None and (src not in self.nodes or dst not in self.nodes):
            raise TransportFailure(f"unknown endpoint in ({src}, {dst})")
        if nbytes < 0:
            raise TransportFailure("negative payload size")
        key = (src, dst)
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + nbytes
        self.messages_sent += 1
        self._queue.append(deliver)

    def flush(self) -> None:
        if self._flushing:
            return
        self._flushing = True
        try:
            while self._queue:
                self._queue.popleft()()
        finally:
            self._flushing = False
