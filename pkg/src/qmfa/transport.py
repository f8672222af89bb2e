"""Carrying protocol lines over an in-process loopback or a TCP stream."""
from __future__ import annotations

import collections
import itertools
import logging
import random
import socket
import socketserver
import threading
from typing import Callable, Deque, List, Optional, Tuple

from ._io import derive_rng
from .authdb import AuthDatabase
from .protocol import (
    MAX_LINE_BYTES,
    ChannelClosed,
    Handshake,
    ServerConfig,
    ServerSession,
    Transcript,
    run_handshake,
)

__all__ = [
    "AuthServer",
    "LoopbackChannel",
    "SocketChannel",
    "connect",
    "run_local_handshake",
    "serve",
    "tap",
]

log = logging.getLogger(__name__)

Tap = Callable[[str, str], None]


class LoopbackChannel:
    """Client end of an in-process connection to a :class:`ServerSession`.

    Lines are handed to the server synchronously; replies queue up for
    :meth:`recv`.  Taps see every line in delivery order and cannot alter it.
    """

    def __init__(self, server: ServerSession) -> None:
        self.server = server
        self._inbox: Deque[str] = collections.deque()
        self._taps: List[Tap] = []
        self.closed = False

    def attach_tap(self, observer: Tap) -> None:
        self._taps.append(observer)

    def detach_tap(self, observer: Tap) -> None:
        self._taps.remove(observer)

    def _notify(self, direction: str, line: str) -> None:
        for observer in self._taps:
            observer(direction, line)

    def send(self, line: str) -> None:
        if self.closed:
            raise ChannelClosed("channel closed")
        self._notify("C", line)
        for reply in self.server.handle(line):
            self._inbox.append(reply)
            self._notify("S", reply)

    def recv(self) -> str:
        if not self._inbox:
            if self.server.done or self.closed:
                raise ChannelClosed("server finished without replying")
            raise ChannelClosed("no reply pending")
        return self._inbox.popleft()

    def close(self) -> None:
        self.closed = True
        self.server.close()


def tap(channel) -> Transcript:
    """Attach a passive observer to ``channel`` and return the transcript it fills."""
    transcript = Transcript()
    channel.attach_tap(transcript.record)
    return transcript


def run_local_handshake(
    client,
    db: AuthDatabase,
    config: ServerConfig,
    server_rng: random.Random,
    observers: Tuple[Tap, ...] = (),
    logger: logging.Logger = log,
) -> Tuple[Handshake, ServerSession]:
    server = ServerSession(db, config, server_rng, logger=logger)
    channel = LoopbackChannel(server)
    for observer in observers:
        channel.attach_tap(observer)
    result = run_handshake(client, channel)
    server.close()
    return result, server


# -------------------------------------------------------------------- sockets


class SocketChannel:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._rfile = sock.makefile("rb")

    def send(self, line: str) -> None:
        try:
            self.sock.sendall(line.encode("utf-8") + b"\n")
        except OSError as exc:
            raise ChannelClosed(str(exc)) from None

    def recv(self) -> str:
        try:
            raw = self._rfile.readline(MAX_LINE_BYTES + 1)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from None
        if not raw.endswith(b"\n"):
            raise ChannelClosed("connection closed")
        return raw[:-1].decode("utf-8", errors="replace")

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    def __enter__(self) -> "SocketChannel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(address: Tuple[str, int], timeout: float = 10.0) -> SocketChannel:
    sock = socket.create_connection(address, timeout=timeout)
    return SocketChannel(sock)


class _Handler(socketserver.StreamRequestHandler):
    server: "AuthServer"

    def handle(self) -> None:
        srv = self.server
        conn_id = next(srv._conn_ids)
        session = ServerSession(srv.db, srv.config, srv.session_rng(conn_id), logger=srv.logger)
        self.request.settimeout(srv.config.timeout)
        try:
            while not session.done:
                try:
                    raw = self.rfile.readline(MAX_LINE_BYTES + 1)
                except socket.timeout:
                    self._send(conn_id, session.expire())
                    break
                if not raw.endswith(b"\n"):
                    if len(raw) > MAX_LINE_BYTES:
                        # parse_message rejects the oversized line with a protocol error
                        self._send(conn_id, session.handle(raw.decode("utf-8", errors="replace")))
                    break
                line = raw[:-1].decode("utf-8", errors="replace")
                srv._notify(conn_id, "C", line)
                self._send(conn_id, session.handle(line))
        except OSError:
            pass
        finally:
            session.close()
            srv._session_done(session)

    def _send(self, conn_id: int, lines: List[str]) -> None:
        for line in lines:
            srv = self.server
            srv._notify(conn_id, "S", line)
            self.wfile.write(line.encode("utf-8") + b"\n")
        self.wfile.flush()


class AuthServer(socketserver.ThreadingTCPServer):
    """Threaded TCP service: one protocol session per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(
        self,
        address: Tuple[str, int],
        db: AuthDatabase,
        config: ServerConfig,
        seed: Optional[int] = None,
        on_session: Optional[Callable[[ServerSession], None]] = None,
        logger: logging.Logger = log,
    ) -> None:
        super().__init__(address, _Handler)
        self.db = db
        self.config = config
        self.seed = seed
        self.on_session = on_session
        self.logger = logger
        self._conn_ids = itertools.count()
        self._taps: List[Callable[[int, str, str], None]] = []
        self._thread: Optional[threading.Thread] = None
        self.verdicts = []

    @property
    def address(self) -> Tuple[str, int]:
        return self.server_address[:2]

    def session_rng(self, conn_id: int) -> random.Random:
        return derive_rng(self.seed, "server-session", conn_id)

    def add_tap(self, observer: Callable[[int, str, str], None]) -> None:
        self._taps.append(observer)

    def _notify(self, conn_id: int, direction: str, line: str) -> None:
        for observer in self._taps:
            observer(conn_id, direction, line)

    def _session_done(self, session: ServerSession) -> None:
        self.verdicts.append(session.verdict)
        if self.on_session is not None:
            self.on_session(session)

    def start(self) -> "AuthServer":
        self._thread = threading.Thread(target=self.serve_forever, name="qmfa-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "AuthServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(
    address: Tuple[str, int],
    db: AuthDatabase,
    config: ServerConfig,
    seed: Optional[int] = None,
    **kwargs,
) -> AuthServer:
    """Bind ``address`` and start serving in a background thread."""
    return AuthServer(address, db, config, seed=seed, **kwargs).start()
