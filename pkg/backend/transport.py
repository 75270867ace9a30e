"""
Point-to-point transports for overlay frames
An in-memory queue for deterministic runs and OS loopback sockets for live demos
"""

import logging
import socket
import struct
import threading
from collections import deque
from typing import Callable, Deque, Dict, Optional, Protocol, Tuple

from errors import LinkDown

logger = logging.getLogger(__name__)

Handler = Callable[[int, bytes], None]


class Transport(Protocol):
    def connect(self, node_id: int, handler: Handler) -> None: ...

    def disconnect(self, node_id: int) -> None: ...

    def send(self, src: int, dst: int, data: bytes) -> None: ...

    def flush(self, timeout: float = 10.0) -> None: ...

    def close(self) -> None: ...


class InMemoryTransport:
    """FIFO delivery pumped by the caller; single-threaded and deterministic"""

    def __init__(self, latency: float = 0.0):
        self.connections: Dict[int, Handler] = {}
        self.latency = latency
        self.elapsed = 0.0
        self.messages_sent = 0
        self._queue: Deque[Tuple[int, int, bytes]] = deque()

    def connect(self, node_id: int, handler: Handler) -> None:
        self.connections[node_id] = handler

    def disconnect(self, node_id: int) -> None:
        self.connections.pop(node_id, None)

    def is_connected(self, node_id: int) -> bool:
        return node_id in self.connections

    def send(self, src: int, dst: int, data: bytes) -> None:
        if dst not in self.connections:
            raise LinkDown(f"no endpoint for node {dst:x}")
        self._queue.append((src, dst, data))
        self.messages_sent += 1

    def flush(self, timeout: float = 10.0) -> None:
        while self._queue:
            src, dst, data = self._queue.popleft()
            handler = self.connections.get(dst)
            if handler is None:
                logger.warning(f"dropping frame for departed node {dst:x}")
                continue
            self.elapsed += self.latency
            handler(src, data)

    def close(self) -> None:
        self._queue.clear()
        self.connections.clear()


class LoopbackTransport:
    """One listening socket and server thread per node on 127.0.0.1

    Frames are length-prefixed: a 4-byte big-endian size, then the sender id
    as 32 bytes, then the payload. Handlers run on the receiving node's thread.
    """

    HEADER = struct.Struct(">I")

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self.connections: Dict[int, Handler] = {}
        self.ports: Dict[int, int] = {}
        self._servers: Dict[int, socket.socket] = {}
        self._threads: Dict[int, threading.Thread] = {}
        self._outbound: Dict[Tuple[int, int], socket.socket] = {}
        self._send_locks: Dict[Tuple[int, int], threading.Lock] = {}
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._in_flight = 0
        self.messages_sent = 0

    def connect(self, node_id: int, handler: Handler) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((self.host, 0))
        server.listen()
        self.connections[node_id] = handler
        self.ports[node_id] = server.getsockname()[1]
        self._servers[node_id] = server
        thread = threading.Thread(target=self._serve, args=(node_id, server), name=f"node-{node_id:x}", daemon=True)
        self._threads[node_id] = thread
        thread.start()
        logger.debug(f"node {node_id:x} listening on {self.host}:{self.ports[node_id]}")

    def disconnect(self, node_id: int) -> None:
        server = self._servers.pop(node_id, None)
        self.connections.pop(node_id, None)
        self.ports.pop(node_id, None)
        if server is not None:
            try:
                server.close()
            except OSError:
                pass
        with self._lock:
            stale = [key for key in self._outbound if node_id in key]
            for key in stale:
                self._outbound.pop(key).close()

    def is_connected(self, node_id: int) -> bool:
        return node_id in self.connections

    def _serve(self, node_id: int, server: socket.socket) -> None:
        while True:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            threading.Thread(target=self._read_loop, args=(node_id, conn), daemon=True).start()

    def _read_exact(self, conn: socket.socket, n: int) -> Optional[bytes]:
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def _read_loop(self, node_id: int, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    header = self._read_exact(conn, self.HEADER.size)
                    if header is None:
                        return
                    body = self._read_exact(conn, self.HEADER.unpack(header)[0])
                    if body is None:
                        return
                except OSError:
                    return
                src = int.from_bytes(body[:32], "big")
                try:
                    handler = self.connections.get(node_id)
                    if handler is not None:
                        handler(src, body[32:])
                except Exception as e:
                    logger.error(f"Error handling frame at node {node_id:x}: {e}")
                finally:
                    self._done()

    def _done(self) -> None:
        with self._idle:
            self._in_flight -= 1
            if self._in_flight == 0:
                self._idle.notify_all()

    def send(self, src: int, dst: int, data: bytes) -> None:
        port = self.ports.get(dst)
        if port is None:
            raise LinkDown(f"no endpoint for node {dst:x}")
        body = src.to_bytes(32, "big") + data
        with self._lock:
            sock = self._outbound.get((src, dst))
            if sock is None:
                sock = socket.create_connection((self.host, port))
                self._outbound[(src, dst)] = sock
                self._send_locks[(src, dst)] = threading.Lock()
            send_lock = self._send_locks[(src, dst)]
            self._in_flight += 1
            self.messages_sent += 1
        try:
            with send_lock:
                sock.sendall(self.HEADER.pack(len(body)) + body)
        except OSError as e:
            self._done()
            with self._lock:
                self._outbound.pop((src, dst), None)
            raise LinkDown(f"send {src:x} -> {dst:x} failed: {e}") from e

    def flush(self, timeout: float = 10.0) -> None:
        """Block until every frame sent so far has been handled"""
        with self._idle:
            if not self._idle.wait_for(lambda: self._in_flight == 0, timeout=timeout):
                logger.warning(f"{self._in_flight} frames still in flight after {timeout}s")

    def close(self) -> None:
        for node_id in list(self._servers):
            self.disconnect(node_id)
        with self._lock:
            for sock in self._outbound.values():
                sock.close()
            self._outbound.clear()


def make_transport(kind: str = "memory") -> Transport:
    if kind == "memory":
        return InMemoryTransport()
    if kind == "loopback":
        return LoopbackTransport()
    raise ValueError(f"unknown transport '{kind}'")
