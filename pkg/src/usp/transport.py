"""Byte-stream transports and framed message channels.

Two interchangeable stream flavors: an in-memory duplex pair for
deterministic tests (optionally with a scripted fault plan) and a TCP
adapter for real interop. Both present the same contract: ordered,
unduplicated bytes; read() returns b"" at end-of-stream; writes after
the connection died raise ConnectionLost. close() tears down both
directions, because every failure path in this protocol terminates the
whole session; bytes already in flight remain readable by the peer.

FrameChannel binds the wire format to a stream: one send() per message,
one recv() per decoded frame regardless of how the bytes were chunked.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass

from .errors import UspError
from .wire import (
    HEADER_SIZE,
    MAX_FRAME_BYTES,
    MalformedKind,
    MalformedMessage,
    Message,
    _HEADER,
    decode_frame,
    encode_frame,
)

DEFAULT_POLL_INTERVAL = 0.02


class TransportError(UspError):
    pass


class ConnectionLost(TransportError):
    """The peer vanished: reset, broken pipe, or EOF mid-frame."""


class ConnectRefused(TransportError):
    pass


class ConnectTimeout(TransportError):
    pass


class BindError(TransportError):
    pass


class ListenerClosed(TransportError):
    pass


class ReadTimeout(TransportError):
    """A read gave up before any byte arrived; the stream is still usable."""


class RecvTimeout(TransportError):
    """FrameChannel.recv hit its deadline before a full frame arrived."""


class StreamHandle:
    """Reliable duplex byte stream; one owner at a time."""

    peer_label: str = "?"

    def read(self, n: int, timeout: float | None = None) -> bytes:
        """Return 1..n bytes, b"" at end-of-stream; ReadTimeout when given up."""
        raise NotImplementedError

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def shutdown_write(self) -> None:
        """Signal EOF to the peer while still reading; used by test tooling."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


@dataclass
class FaultPlan:
    """Scripted misbehavior for an in-memory pair.

    drop_at_byte: the connection dies when a write would push the pair's
    total transferred byte count past this limit.
    delay_per_write: real seconds to sleep before each delivery.
    """

    drop_at_byte: int | None = None
    delay_per_write: float = 0.0


class _PairState:
    def __init__(self, plan: FaultPlan | None):
        self.plan = plan or FaultPlan()
        self.bytes_written = 0
        self.dropped = False
        self.lock = threading.Lock()

    def account(self, n: int) -> None:
        with self.lock:
            if self.dropped:
                raise ConnectionLost("connection previously dropped by fault plan")
            limit = self.plan.drop_at_byte
            if limit is not None and self.bytes_written + n > limit:
                self.dropped = True
                raise ConnectionLost(f"fault plan dropped connection at byte {limit}")
            self.bytes_written += n


class _Pipe:
    """One direction of an in-memory duplex channel."""

    def __init__(self) -> None:
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()

    def push(self, data: bytes) -> None:
        with self.cond:
            if self.closed:
                raise ConnectionLost("peer closed the stream")
            self.buf.extend(data)
            self.cond.notify_all()

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()

    def pull(self, n: int, timeout: float | None) -> bytes:
        with self.cond:
            if not self.buf and not self.closed:
                if not self.cond.wait_for(lambda: self.buf or self.closed, timeout):
                    raise ReadTimeout("no data within timeout")
            if self.buf:
                piece = bytes(self.buf[:n])
                del self.buf[:n]
                return piece
            return b""


class MemoryStream(StreamHandle):
    def __init__(self, rx: _Pipe, tx: _Pipe, pair: _PairState, label: str):
        self._rx = rx
        self._tx = tx
        self._pair = pair
        self._closed = False
        self.peer_label = label

    def read(self, n: int, timeout: float | None = None) -> bytes:
        if self._closed:
            return b""
        return self._rx.pull(n, timeout)

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionLost("stream is closed locally")
        if self._pair.plan.delay_per_write:
            time.sleep(self._pair.plan.delay_per_write)
        self._pair.account(len(data))
        self._tx.push(data)

    def shutdown_write(self) -> None:
        self._tx.close()

    def close(self) -> None:
        self._closed = True
        self._tx.close()
        self._rx.close()


def memory_pair(fault_plan: FaultPlan | None = None) -> tuple[MemoryStream, MemoryStream]:
    """A connected in-memory duplex pair (a, b)."""
    state = _PairState(fault_plan)
    ab = _Pipe()
    ba = _Pipe()
    a = MemoryStream(rx=ba, tx=ab, pair=state, label="memory:a")
    b = MemoryStream(rx=ab, tx=ba, pair=state, label="memory:b")
    return a, b


class MemoryListener:
    """Accept side of in-memory connections, mirroring a TCP listener."""

    _SENTINEL = object()

    def __init__(self) -> None:
        self._queue: queue.Queue = queue.Queue()
        self._closed = False

    def connect(self, fault_plan: FaultPlan | None = None) -> MemoryStream:
        """Dial this listener; returns the client end."""
        if self._closed:
            raise ConnectRefused("listener is closed")
        client, server = memory_pair(fault_plan)
        self._queue.put(server)
        return client

    def accept(self) -> StreamHandle:
        item = self._queue.get()
        if item is self._SENTINEL:
            raise ListenerClosed("listener closed")
        return item

    def close(self) -> None:
        self._closed = True
        self._queue.put(self._SENTINEL)


class SocketStream(StreamHandle):
    def __init__(self, sock: socket.socket, label: str):
        self._sock = sock
        self._lock = threading.Lock()
        self._closed = False
        self.peer_label = label

    def read(self, n: int, timeout: float | None = None) -> bytes:
        try:
            self._sock.settimeout(timeout)
            return self._sock.recv(n)
        except (socket.timeout, BlockingIOError):
            raise ReadTimeout("no data within timeout") from None
        except OSError as exc:
            if self._closed:
                return b""
            raise ConnectionLost(str(exc)) from None

    def write(self, data: bytes) -> None:
        try:
            with self._lock:
                self._sock.settimeout(None)
                self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from None

    def shutdown_write(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self) -> StreamHandle:
        try:
            conn, addr = self._sock.accept()
        except OSError:
            raise ListenerClosed("listener closed") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketStream(conn, label=f"{addr[0]}:{addr[1]}")

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                # Plain close does not wake a blocked accept on Linux.
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def tcp_listen(host: str = "127.0.0.1", port: int = 0) -> TcpListener:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen()
    except OSError as exc:
        sock.close()
        raise BindError(f"cannot listen on {host}:{port}: {exc}") from None
    return TcpListener(sock)


def tcp_dial(host: str, port: int, timeout: float | None = None) -> SocketStream:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.settimeout(timeout)
    try:
        sock.connect((host, port))
    except ConnectionRefusedError:
        sock.close()
        raise ConnectRefused(f"{host}:{port} refused the connection") from None
    except socket.timeout:
        sock.close()
        raise ConnectTimeout(f"no connection to {host}:{port} within {timeout}s") from None
    except OSError as exc:
        sock.close()
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketStream(sock, label=f"{host}:{port}")


class FrameChannel:
    """Framed messages over a StreamHandle.

    recv() reads exactly one frame's bytes, so nothing beyond the current
    frame is ever consumed from the stream; buffering is bounded by
    MAX_FRAME_BYTES plus the header. A deadline is expressed in the
    caller's clock and checked between short real-time polls, which lets
    virtual clocks drive timeouts without real waiting.
    """

    def __init__(self, stream: StreamHandle):
        self.stream = stream

    def send(self, msg: Message) -> None:
        self.stream.write(encode_frame(msg))

    def recv(self, deadline: float | None = None, clock=time.time) -> Message | None:
        """Next decoded message, or None when the peer closed cleanly.

        Raises MalformedMessage for undecodable frames, ConnectionLost for
        mid-frame EOF, RecvTimeout when the deadline passes first.
        """
        header = self._read_exact(HEADER_SIZE, deadline, clock, eof_ok=True)
        if header is None:
            return None
        (length,) = _HEADER.unpack(header)
        if length > MAX_FRAME_BYTES:
            raise MalformedMessage(MalformedKind.OVERSIZE, f"declared length {length}")
        body = self._read_exact(length, deadline, clock, eof_ok=False)
        assert body is not None
        return decode_frame(header + body)

    def _read_exact(
        self, n: int, deadline: float | None, clock, eof_ok: bool
    ) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            if deadline is None:
                timeout = None
            else:
                if clock() >= deadline:
                    raise RecvTimeout("deadline passed")
                timeout = DEFAULT_POLL_INTERVAL
            try:
                chunk = self.stream.read(n - len(buf), timeout=timeout)
            except ReadTimeout:
                continue
            if chunk == b"":
                if eof_ok and not buf:
                    return None
                raise ConnectionLost("end of stream inside a frame")
            buf.extend(chunk)
        return bytes(buf)

    def peek_pending(self) -> bool:
        """True when bytes are already waiting beyond the last frame read."""
        try:
            chunk = self.stream.read(1, timeout=0)
        except (ReadTimeout, ConnectionLost):
            return False
        if chunk == b"":
            return False
        # The byte is intentionally consumed: this check only runs on the
        # way to tearing the session down.
        return True
