"""Message transports for agents.

``InMemoryNetwork`` is used by the scenario runner. Nothing moves until the
harness calls :meth:`InMemoryNetwork.step` or :meth:`run_until_idle`, so the
delivery order is fully controlled (FIFO, or seeded-random across
destinations while staying FIFO per destination).

``LoopbackTransport`` carries the same envelopes over TCP on 127.0.0.1 with
4-byte length-prefixed frames. It is used for multi-process demos and the
end-to-end latency check.
"""

from __future__ import annotations

import random
import socket
import socketserver
import struct
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Callable

Handler = Callable[[bytes], None]


@dataclass(frozen=True)
class Delivery:
    step: int
    source: str | None
    destination: str
    data: bytes


class TransportError(OSError):
    pass


class InMemoryNetwork:
    def __init__(self, rng: random.Random | None = None):
        self._handlers: dict[str, Handler] = {}
        self._queues: OrderedDict[str, deque] = OrderedDict()
        self._rng = rng
        self.clock = 0
        self.captured: list[Delivery] = []
        self.on_deliver: Callable[[Delivery], None] | None = None
        self._current: str | None = None
        self.down: set[str] = set()

    def register(self, name: str, handler: Handler) -> str:
        endpoint = f"mem://{name}"
        if endpoint in self._handlers:
            raise ValueError(f"endpoint {endpoint} already registered")
        self._handlers[endpoint] = handler
        self._queues[endpoint] = deque()
        return endpoint

    def send(self, endpoint: str, data: bytes) -> None:
        if endpoint not in self._handlers or endpoint in self.down:
            raise TransportError(f"unreachable endpoint {endpoint}")
        self._queues[endpoint].append((self._current, bytes(data)))

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def step(self) -> bool:
        ready = [ep for ep, q in self._queues.items() if q]
        if not ready:
            return False
        dest = ready[0] if self._rng is None else self._rng.choice(ready)
        source, data = self._queues[dest].popleft()
        self.clock += 1
        delivery = Delivery(self.clock, source, dest, data)
        self.captured.append(delivery)
        if self.on_deliver is not None:
            self.on_deliver(delivery)
        previous, self._current = self._current, dest
        try:
            self._handlers[dest](data)
        finally:
            self._current = previous
        return True

    def run_until_idle(self, max_steps: int = 100_000) -> int:
        steps = 0
        while steps < max_steps and self.step():
            steps += 1
        return steps

    def close(self) -> None:
        pass


def _read_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            header = _read_exact(sock, 4)
            if header is None:
                return
            data = _read_exact(sock, struct.unpack(">I", header)[0])
            if data is None:
                return
            self.server.deliver(data)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, handler: Handler):
        super().__init__(("127.0.0.1", 0), _FrameHandler)
        self._handler = handler
        self._lock = threading.Lock()

    def deliver(self, data):
        # agents are single-threaded over their own state
        with self._lock:
            self._handler(data)


class LoopbackTransport:
    def __init__(self):
        self._servers: list[_Server] = []
        self._conns: dict[str, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self.on_deliver: Callable[[Delivery], None] | None = None

    def register(self, name: str, handler: Handler) -> str:
        def deliver(data, _name=name):
            if self.on_deliver is not None:
                self.on_deliver(Delivery(0, None, _name, data))
            handler(data)

        server = _Server(deliver)
        threading.Thread(target=server.serve_forever, args=(0.02,), name=f"loopback-{name}", daemon=True).start()
        self._servers.append(server)
        host, port = server.server_address
        return f"tcp://{host}:{port}"

    def send(self, endpoint: str, data: bytes) -> None:
        if not endpoint.startswith("tcp://"):
            raise TransportError(f"not a tcp endpoint: {endpoint}")
        with self._conn_lock:
            sock = self._conns.get(endpoint)
            try:
                if sock is None:
                    host, port = endpoint[len("tcp://"):].rsplit(":", 1)
                    sock = socket.create_connection((host, int(port)), timeout=5)
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    self._conns[endpoint] = sock
                sock.sendall(struct.pack(">I", len(data)) + data)
            except OSError as exc:
                self._conns.pop(endpoint, None)
                raise TransportError(f"send to {endpoint} failed: {exc}") from exc

    def close(self) -> None:
        with self._conn_lock:
            for sock in self._conns.values():
                sock.close()
            self._conns.clear()
        for server in self._servers:
            server.shutdown()
            server.server_close()
