"""Point-to-point message transports: in-memory queues and framed TCP."""

from __future__ import annotations

import queue
import socket

from .protocol import (
    HEADER_SIZE,
    Control,
    EmbeddingsBatch,
    PointsBatch,
    decode_message,
    encode_message,
    frame_length,
    points_frame_size,
)

_CLOSED = object()


def wire_size(msg) -> int:
    """Encoded size of ``msg`` without encoding it."""
    if isinstance(msg, PointsBatch):
        return points_frame_size(msg.n_rays, msg.n_samples)
    if isinstance(msg, EmbeddingsBatch):
        return HEADER_SIZE + 8 + 4 * msg.values.size
    if isinstance(msg, Control):
        return len(encode_message(msg))
    raise TypeError(type(msg).__name__)


class Transport:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0

    def send(self, msg) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None):
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryTransport(Transport):
    """One end of an in-process channel.

    With ``codec=False`` message objects cross unchanged (float64, lossless);
    with ``codec=True`` each message is encoded to bytes and decoded on arrival,
    exactly as over TCP.
    """

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, codec: bool):
        self.inbox, self.outbox, self.codec = inbox, outbox, codec
        self.bytes_sent = self.bytes_received = 0
        self.frames_sent = self.frames_received = 0
        self.closed = False

    def send(self, msg) -> None:
        if self.closed:
            raise ConnectionError("transport closed")
        if self.codec:
            data = encode_message(msg)
            size = len(data)
            self.outbox.put((data, size))
        else:
            size = wire_size(msg)
            self.outbox.put((msg, size))
        self.bytes_sent += size
        self.frames_sent += 1

    def recv(self, timeout: float | None = None):
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty as exc:
            raise TimeoutError("no message from peer") from exc
        if item is _CLOSED:
            self.inbox.put(_CLOSED)
            raise ConnectionError("peer closed the channel")
        payload, size = item
        self.bytes_received += size
        self.frames_received += 1
        return decode_message(payload) if self.codec else payload

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.outbox.put(_CLOSED)


def memory_pair(codec: bool = False) -> tuple[MemoryTransport, MemoryTransport]:
    a, b = queue.Queue(), queue.Queue()
    return MemoryTransport(a, b, codec), MemoryTransport(b, a, codec)


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = self.bytes_received = 0
        self.frames_sent = self.frames_received = 0

    def send(self, msg) -> None:
        data = encode_message(msg)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        self.frames_sent += 1

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ConnectionError(f"connection closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None):
        self.sock.settimeout(timeout)
        try:
            header = self._read_exact(HEADER_SIZE)
            _, length = frame_length(header)
            payload = self._read_exact(length)
        except socket.timeout as exc:
            raise TimeoutError("no message from peer") from exc
        self.bytes_received += HEADER_SIZE + length
        self.frames_received += 1
        return decode_message(header + payload)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def tcp_accept(listener: socket.socket, timeout: float | None = None) -> TcpTransport:
    listener.settimeout(timeout)
    conn, _ = listener.accept()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn.settimeout(None)
    return TcpTransport(conn)


def tcp_connect(host: str, port: int, timeout: float = 10.0) -> TcpTransport:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return TcpTransport(sock)


class TraceWriter:
    """Server hook appending every observed exchange to a file of encoded frames.

    The file starts with the session's config frame, so it can be replayed offline.
    ``config`` may be a dict or a zero-argument callable evaluated at the first write
    (a server only learns the config once the session has started).
    """

    def __init__(self, path, config):
        self.fh = open(path, "wb")
        self.config = config
        self.iterations = 0
        self._header = False

    def _write_header(self):
        if not self._header:
            cfg = self.config() if callable(self.config) else self.config
            self.fh.write(encode_message(Control("config", cfg)))
            self._header = True

    def __call__(self, points, emb_msg, grad_msg):
        self._write_header()
        for msg in (points, emb_msg, grad_msg):
            self.fh.write(encode_message(msg))
        self.iterations += 1

    def close(self):
        if not self.fh.closed:
            self._write_header()
            self.fh.close()


def iter_trace(path):
    """Yield ``(config, [(points, embeddings, gradients), ...])`` lazily from a trace file.

    Returns the config dict first, then a generator of exchanges.
    """
    fh = open(path, "rb")

    def frame():
        header = fh.read(HEADER_SIZE)
        if not header:
            return None
        _, length = frame_length(header)
        payload = fh.read(length)
        return decode_message(header + payload)

    first = frame()
    if not isinstance(first, Control) or first.kind != "config":
        fh.close()
        raise ValueError(f"{path}: trace must start with a config frame")

    def exchanges():
        try:
            while True:
                p = frame()
                if p is None:
                    return
                e, g = frame(), frame()
                if not (isinstance(p, PointsBatch) and isinstance(e, EmbeddingsBatch) and isinstance(g, EmbeddingsBatch)):
                    raise ValueError(f"{path}: malformed exchange near iteration {getattr(p, 't', '?')}")
                yield p, e, g
        finally:
            fh.close()

    return first.config, exchanges()
