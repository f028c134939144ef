"""Clocks, delay models, delivery scheduling, and frame connections.

A stack runs in one of two modes:

* stepped  - virtual clock, every send dispatches inline in the caller's
  stack, scheduled work runs immediately.  Deterministic; used by the day
  simulation and the scenario runner.
* threaded - real clock, sends cross thread boundaries, scheduled work runs
  on a timer thread at its due time.  Used by the latency bench and the TCP
  servers.

Both modes move encoded frame bytes end to end, so the codec is exercised on
every hop regardless of transport.
"""

from __future__ import annotations

import heapq
import itertools
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .model import FrameDecodeError, FrameReader, Message, decode_frame, encode_frame


class Clock:
    """Millisecond clock relative to a per-run epoch."""

    def __init__(self, *, virtual: bool, epoch_unix_s: float | None = None) -> None:
        self.virtual = virtual
        self._now_ms = 0
        if virtual:
            self.epoch_unix_s = 0.0
        else:
            self.epoch_unix_s = time.time() if epoch_unix_s is None else epoch_unix_s

    @classmethod
    def real(cls, epoch_unix_s: float | None = None) -> "Clock":
        return cls(virtual=False, epoch_unix_s=epoch_unix_s)

    @classmethod
    def stepped(cls) -> "Clock":
        return cls(virtual=True)

    def now_ms(self) -> int:
        if self.virtual:
            return self._now_ms
        return int((time.time() - self.epoch_unix_s) * 1000)

    def advance_to(self, ms: int) -> None:
        if not self.virtual:
            raise RuntimeError("cannot set a real clock")
        if ms >= self._now_ms:
            self._now_ms = ms


@dataclass(frozen=True)
class DelayModel:
    """Uniform latency in [mean - jitter, mean + jitter] ms, clamped at 0."""

    mean_ms: float = 0.0
    jitter_ms: float = 0.0

    def sample(self, rng: random.Random) -> float:
        if self.mean_ms <= 0 and self.jitter_ms <= 0:
            return 0.0
        lo = self.mean_ms - self.jitter_ms
        hi = self.mean_ms + self.jitter_ms
        return max(0.0, rng.uniform(lo, hi))

    @classmethod
    def zero(cls) -> "DelayModel":
        return cls(0.0, 0.0)

    @classmethod
    def fixed(cls, mean_ms: float) -> "DelayModel":
        return cls(mean_ms, 0.0)


class Scheduler:
    """Runs callbacks at a due time (clock ms); inline when stepped."""

    def __init__(self, clock: Clock) -> None:
        self._clock = clock
        self._seq = itertools.count()
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._cond = threading.Condition()
        self._closed = False
        self._thread: threading.Thread | None = None
        if not clock.virtual:
            self._thread = threading.Thread(target=self._run, name="scheduler", daemon=True)
            self._thread.start()

    def schedule(self, due_ms: float, fn: Callable[[], None]) -> None:
        if self._clock.virtual:
            fn()
            return
        with self._cond:
            if self._closed:
                return
            heapq.heappush(self._heap, (due_ms, next(self._seq), fn))
            self._cond.notify()

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._closed and (not self._heap or self._heap[0][0] > self._clock.now_ms()):
                    if self._heap:
                        wait_s = max(0.0, (self._heap[0][0] - self._clock.now_ms()) / 1000.0)
                        self._cond.wait(timeout=min(wait_s, 0.5))
                    else:
                        self._cond.wait(timeout=0.5)
                if self._closed:
                    return
                _, _, fn = heapq.heappop(self._heap)
            try:
                fn()
            except Exception:
                pass  # a failed delivery must not kill the timer thread

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._heap.clear()
            self._cond.notify_all()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2.0)


class ConnClosed(Exception):
    pass


class FrameConn:
    """One endpoint of a bidirectional frame pipe.

    Inbound frames go to the receiver callback when one is set (servers and
    gateways), otherwise into an inbox read with ``recv`` (clients).
    """

    def __init__(self) -> None:
        self._receiver: Optional[Callable[[Message], None]] = None
        self._inbox: deque[Message] = deque()
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._closed = False
        self.on_close: Optional[Callable[[], None]] = None

    # -- inbound side -------------------------------------------------
    def set_receiver(self, cb: Callable[[Message], None]) -> None:
        with self._lock:
            backlog = list(self._inbox)
            self._inbox.clear()
            self._receiver = cb
        for msg in backlog:
            cb(msg)

    def _dispatch(self, data: bytes) -> None:
        self._deliver(decode_frame(data))

    def _deliver(self, msg: Message) -> None:
        with self._lock:
            receiver = self._receiver
            if receiver is None:
                self._inbox.append(msg)
                self._ready.notify_all()
        if receiver is not None:
            receiver(msg)

    def recv(self, timeout: float | None = None) -> Message:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while not self._inbox:
                if self._closed:
                    raise ConnClosed("connection closed")
                if deadline is None:
                    self._ready.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._ready.wait(timeout=remaining):
                        raise TimeoutError("no frame within timeout")
            return self._inbox.popleft()

    def try_recv(self) -> Message | None:
        with self._lock:
            return self._inbox.popleft() if self._inbox else None

    def pending(self) -> int:
        with self._lock:
            return len(self._inbox)

    # -- outbound side ------------------------------------------------
    def send(self, msg: Message) -> None:
        self.send_line(encode_frame(msg))

    def send_line(self, data: bytes) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        cb = None
        with self._lock:
            if not self._closed:
                self._closed = True
                cb = self.on_close
                self._ready.notify_all()
        if cb is not None:
            cb()


class MemoryConn(FrameConn):
    """In-memory endpoint; bytes handed straight to the peer endpoint."""

    def __init__(self) -> None:
        super().__init__()
        self._peer: MemoryConn | None = None

    @classmethod
    def pair(cls) -> tuple["MemoryConn", "MemoryConn"]:
        a, b = cls(), cls()
        a._peer, b._peer = b, a
        return a, b

    def send_line(self, data: bytes) -> None:
        peer = self._peer
        if self._closed or peer is None or peer._closed:
            raise ConnClosed("peer is closed")
        peer._dispatch(data)

    def close(self) -> None:
        peer = self._peer
        super().close()
        if peer is not None and not peer._closed:
            peer.close()


class TcpConn(FrameConn):
    """TCP endpoint: reader thread feeds frames in, writer thread drains out."""

    def __init__(self, sock: socket.socket) -> None:
        super().__init__()
        self._sock = sock
        self._outq: deque[bytes] = deque()
        self._out_cond = threading.Condition()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._reader.start()
        self._writer.start()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "TcpConn":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send_line(self, data: bytes) -> None:
        if self._closed:
            raise ConnClosed("connection closed")
        with self._out_cond:
            self._outq.append(data)
            self._out_cond.notify()

    def _write_loop(self) -> None:
        while True:
            with self._out_cond:
                while not self._outq and not self._closed:
                    self._out_cond.wait(timeout=0.5)
                if self._closed and not self._outq:
                    return
                data = self._outq.popleft()
            try:
                self._sock.sendall(data)
            except OSError:
                self.close()
                return

    def _read_loop(self) -> None:
        reader = FrameReader()
        while not self._closed:
            try:
                chunk = self._sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            try:
                for msg in reader.feed(chunk):
                    self._deliver(msg)
            except FrameDecodeError:
                break  # a corrupt stream kills the connection, never the process
        self.close()

    def close(self) -> None:
        already = self._closed
        super().close()
        if not already:
            with self._out_cond:
                self._out_cond.notify_all()
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass


class TcpListener:
    """Accept loop that hands each connection to a frontend callback."""

    def __init__(self, host: str, port: int, on_conn: Callable[[TcpConn], None]) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(512)
        self.port = self._sock.getsockname()[1]
        self._on_conn = on_conn
        self._closed = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._on_conn(TcpConn(sock))

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass
