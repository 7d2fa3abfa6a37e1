"""TCP endpoints wrapping the handshake state machines.

The server echoes application data back to the client; the client sends a
payload and waits for the echo. Both can log their wire bytes to a capture
file shared across connections.
"""

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .crypto import Direction
from .handshake import (
    ClientConfig,
    ClientConnection,
    Connection,
    HandshakeError,
    ServerConfig,
    ServerConnection,
)
from .lab.capture import format_event, make_event
from .lab.observer import FlowId
from .wire import DecodeError, RecordFrame, RecordReader, encode_record

logger = logging.getLogger(__name__)

RECV_SIZE = 65536


class CaptureSink:
    """Append-only capture file; writes from concurrent connections are serialized."""

    def __init__(self, path: str) -> None:
        self._fh = open(path, "a", encoding="ascii")
        self._lock = threading.Lock()
        self._t0 = time.monotonic()

    def record(self, flow: FlowId, direction: Direction, data: bytes) -> None:
        event = make_event(time.monotonic() - self._t0, flow, direction, data)
        with self._lock:
            self._fh.write(format_event(event))
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def _send(sock: socket.socket, frames: List[RecordFrame], sink: Optional[CaptureSink], flow: FlowId,
          direction: Direction) -> None:
    for frame in frames:
        data = encode_record(frame)
        if sink is not None:
            sink.record(flow, direction, data)
        sock.sendall(data)


def _log_completions(conn: Connection, seen: int, **fields) -> int:
    for record in conn.completed[seen:]:
        logger.info(
            "handshake phase complete",
            extra={"event": "phase_complete", "phase": record.phase.name, "subject": record.subject,
                   "sni": record.sni, **fields},
        )
    return len(conn.completed)


class _Handler(socketserver.BaseRequestHandler):
    server: "VeilServer"

    def handle(self) -> None:
        srv = self.server
        flow = FlowId(f"{self.client_address[0]}:{self.client_address[1]}",
                      f"{srv.server_address[0]}:{srv.server_address[1]}", srv.next_connection_number())
        conn = ServerConnection(srv.config)
        reader = RecordReader()
        seen = 0
        self.request.settimeout(srv.idle_timeout)
        try:
            while True:
                try:
                    data = self.request.recv(RECV_SIZE)
                except socket.timeout:
                    break
                if not data:
                    break
                if srv.sink is not None:
                    srv.sink.record(flow, Direction.CLIENT_TO_SERVER, data)
                out: List[RecordFrame] = []
                for frame in reader.feed(data):
                    out += conn.step(frame)
                    seen = _log_completions(conn, seen, connection=flow.number)
                    if conn.received:
                        out += conn.send_application_data(conn.take_received())
                    if conn.peer_closed:
                        break
                _send(self.request, out, srv.sink, flow, Direction.SERVER_TO_CLIENT)
                if conn.peer_closed:
                    _send(self.request, conn.close(), srv.sink, flow, Direction.SERVER_TO_CLIENT)
                    break
        except HandshakeError as exc:
            logger.warning("handshake failed", extra={"event": "handshake_failed", "connection": flow.number,
                                                      "error": type(exc).__name__, "detail": str(exc)})
            try:
                _send(self.request, exc.outgoing, srv.sink, flow, Direction.SERVER_TO_CLIENT)
            except OSError:
                pass
        except (DecodeError, OSError) as exc:
            logger.warning("connection dropped", extra={"event": "connection_dropped",
                                                        "connection": flow.number, "detail": str(exc)})


class VeilServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address: Tuple[str, int], config: ServerConfig, sink: Optional[CaptureSink] = None,
                 idle_timeout: float = 30.0) -> None:
        self.config = config
        self.sink = sink
        self.idle_timeout = idle_timeout
        self._numbers = iter(range(1 << 62))
        self._numbers_lock = threading.Lock()
        super().__init__(address, _Handler)

    def next_connection_number(self) -> int:
        with self._numbers_lock:
            return next(self._numbers)

    def drain(self) -> None:
        """Stop accepting, then wait for open connections to finish."""
        self.shutdown()
        self.server_close()


@dataclass
class ConnectReport:
    phases: List[Tuple[str, str, float]] = field(default_factory=list)
    established_sni: Optional[str] = None
    fell_back: bool = False
    alerts: List[str] = field(default_factory=list)
    payload_bytes: int = 0
    echoed_ok: bool = False
    elapsed: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.echoed_ok


def connect(host: str, port: int, cfg: ClientConfig, payload: bytes = b"", timeout: float = 10.0,
            sink: Optional[CaptureSink] = None) -> ConnectReport:
    report = ConnectReport(payload_bytes=len(payload))
    start = time.perf_counter()
    conn = ClientConnection(cfg)
    reader = RecordReader()
    with socket.create_connection((host, port), timeout=timeout) as sock:
        local = sock.getsockname()
        flow = FlowId(f"{local[0]}:{local[1]}", f"{host}:{port}", 0)
        seen = 0

        def pump_until(done) -> None:
            nonlocal seen
            while not done():
                data = sock.recv(RECV_SIZE)
                if not data:
                    raise ConnectionError("server closed the connection")
                if sink is not None:
                    sink.record(flow, Direction.SERVER_TO_CLIENT, data)
                for frame in reader.feed(data):
                    out = conn.step(frame)
                    for record in conn.completed[seen:]:
                        report.phases.append((record.phase.name, record.subject, time.perf_counter() - start))
                    seen = len(conn.completed)
                    _send(sock, out, sink, flow, Direction.CLIENT_TO_SERVER)

        try:
            _send(sock, conn.step(), sink, flow, Direction.CLIENT_TO_SERVER)
            pump_until(lambda: conn.established)
            report.established_sni = conn.established_sni
            report.fell_back = conn.fell_back
            if conn.fell_back:
                report.alerts.append("masked_handshake_unsupported")
            if payload:
                # seal up front, then write from a second thread so the echo can be read concurrently
                frames = conn.send_application_data(payload)
                sender = threading.Thread(
                    target=_send, args=(sock, frames, sink, flow, Direction.CLIENT_TO_SERVER), daemon=True
                )
                sender.start()
                pump_until(lambda: len(conn.received) >= len(payload))
                sender.join()
            report.echoed_ok = conn.take_received() == payload
            _send(sock, conn.close(), sink, flow, Direction.CLIENT_TO_SERVER)
        except HandshakeError as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            report.alerts.append(exc.alert.name)
            try:
                _send(sock, exc.outgoing, sink, flow, Direction.CLIENT_TO_SERVER)
            except OSError:
                pass
        except (DecodeError, OSError) as exc:
            report.error = f"{type(exc).__name__}: {exc}"
    report.elapsed = time.perf_counter() - start
    return report
