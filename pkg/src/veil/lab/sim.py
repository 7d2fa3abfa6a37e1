"""Discrete-event testbed: client -> middlebox (observer + shaper) -> bottleneck -> server.

Everything runs on a virtual clock, so a run is a pure function of its
configs and seeds.
"""

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from ..crypto import Direction
from ..handshake import (
    ClientConfig,
    ClientConnection,
    Connection,
    HandshakeError,
    HandshakePhase,
    ServerConfig,
    ServerConnection,
)
from ..wire import DecodeError, RecordFrame, RecordReader, encode_record
from .capture import CaptureEvent, make_event
from .observer import Classification, FlowId, FlowState, observe_bytes
from .shaper import ShaperConfig, shape

REQUEST_PREFIX = b"GET "


class VirtualClock:
    def __init__(self, start: float = 0.0) -> None:
        self._now = start

    @property
    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"virtual clock cannot go back from {self._now} to {t}")
        self._now = t


@dataclass
class LinkSim:
    """Bottleneck link: serialization at ``capacity_bps`` plus a one-way delay."""

    capacity_bps: float = 2.5e6
    delay_ms: float = 10.0
    clock: VirtualClock = field(default_factory=VirtualClock)

    def __post_init__(self) -> None:
        if self.capacity_bps <= 0 or self.delay_ms < 0:
            raise ValueError("capacity must be positive and delay non-negative")


class EventLoop:
    def __init__(self, clock: VirtualClock) -> None:
        self.clock = clock
        self._queue: List[Tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def at(self, t: float, action: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (t, next(self._seq), action))

    def run(self) -> None:
        while self._queue:
            t, _, action = heapq.heappop(self._queue)
            self.clock.advance_to(t)
            action()


@dataclass
class TransferReport:
    mode: str
    payload_bytes: int
    timeline: List[Tuple[float, float]] = field(default_factory=list)
    handshake_durations: Dict[str, float] = field(default_factory=dict)
    capture: List[CaptureEvent] = field(default_factory=list)
    flow: Optional[FlowState] = None
    client_phase: HandshakePhase = HandshakePhase.PLAIN
    server_phase: HandshakePhase = HandshakePhase.PLAIN
    established_sni: Optional[str] = None
    certificate_subjects: List[str] = field(default_factory=list)
    fell_back: bool = False
    bytes_received: int = 0
    completed_at: Optional[float] = None
    error: Optional[str] = None

    @property
    def classification(self) -> Classification:
        return self.flow.classification if self.flow else Classification.PENDING

    @property
    def ok(self) -> bool:
        return self.error is None and self.bytes_received == self.payload_bytes

    def steady_state_throughput(self) -> float:
        """Mean of the full 1 s windows, leaving out the first and the last one."""
        rates = [bps for _, bps in self.timeline]
        inner = rates[1:-1]
        if not inner:
            return sum(rates) / len(rates) if rates else 0.0
        return sum(inner) / len(inner)


def throughput_timeline(arrivals: List[Tuple[float, int]], window: float = 1.0) -> List[Tuple[float, float]]:
    """Bits per second over consecutive windows, keyed by window start."""
    if not arrivals:
        return []
    bins = [0] * (int(math.floor(arrivals[-1][0] / window)) + 1)
    for t, size in arrivals:
        bins[int(t // window)] += size
    return [(i * window, 8 * b / window) for i, b in enumerate(bins)]


def simulate_transfer(
    client_cfg: ClientConfig,
    server_cfg: ServerConfig,
    shaper_cfg: Optional[ShaperConfig] = None,
    link: Optional[LinkSim] = None,
    payload_bytes: int = 0,
    *,
    flow_id: Optional[FlowId] = None,
    record_capture: bool = True,
    window: float = 1.0,
    tamper: Optional[Callable[[Direction, int, bytes], bytes]] = None,
) -> TransferReport:
    """Handshake(s) then a download of ``payload_bytes`` from server to client.

    The client asks for the payload with one small request once its final
    handshake completes; the server answers with the payload as application
    data. The middlebox observes and shapes both directions.
    """
    link = link if link is not None else LinkSim()
    flow_id = flow_id if flow_id is not None else FlowId("client", "server", 0)
    loop = EventLoop(link.clock)
    start = link.clock.now
    client = ClientConnection(client_cfg)
    server = ServerConnection(server_cfg)
    flow = FlowState(flow_id)
    report = TransferReport(client_cfg.mode.value, payload_bytes, flow=flow)
    readers = {d: RecordReader() for d in Direction}
    link_free = {d: start for d in Direction}
    arrivals: List[Tuple[float, int]] = []
    sent = itertools.count()
    failed = []

    def transmit(direction: Direction, frames: List[RecordFrame]) -> None:
        now = link.clock.now
        for frame in frames:
            data = encode_record(frame)
            if tamper is not None:
                data = tamper(direction, next(sent), data)
            if record_capture:
                report.capture.append(make_event(now - start, flow_id, direction, data))
            observe_bytes(flow, direction, data, now - start)
            release = shape(shaper_cfg, flow, len(data), now) if shaper_cfg is not None else now
            begin = max(release, link_free[direction])
            link_free[direction] = begin + len(data) * 8 / link.capacity_bps
            flow.bytes_forwarded += len(data)
            loop.at(link_free[direction] + link.delay_ms / 1000, lambda d=direction, b=data: deliver(d, b))

    def fail(exc: Exception, receiver: Optional[Connection], direction: Direction) -> None:
        if not failed:
            failed.append(exc)
            report.error = f"{type(exc).__name__}: {exc}"
        if isinstance(exc, HandshakeError) and exc.outgoing:
            transmit(direction.reverse, exc.outgoing)

    def deliver(direction: Direction, data: bytes) -> None:
        now = link.clock.now
        receiver = server if direction is Direction.CLIENT_TO_SERVER else client
        if direction is Direction.SERVER_TO_CLIENT:
            arrivals.append((now - start, len(data)))
        try:
            frames = readers[direction].feed(data)
        except DecodeError as exc:
            fail(exc, receiver, direction)
            return
        for frame in frames:
            if receiver.closed:
                return
            done_before = len(receiver.completed)
            try:
                out = receiver.step(frame)
            except HandshakeError as exc:
                fail(exc, receiver, direction)
                return
            transmit(direction.reverse, out)
            if receiver is client:
                for record in client.completed[done_before:]:
                    report.handshake_durations[record.phase.name] = now - start
                    report.certificate_subjects.append(record.subject)
                if client.established and done_before < len(client.completed) and payload_bytes:
                    transmit(Direction.CLIENT_TO_SERVER,
                             client.send_application_data(REQUEST_PREFIX + str(payload_bytes).encode()))
                if client.received:
                    report.bytes_received += len(client.take_received())
                    if report.bytes_received >= payload_bytes:
                        report.completed_at = now - start
            elif server.received:
                request = server.take_received()
                if request.startswith(REQUEST_PREFIX):
                    size = int(request[len(REQUEST_PREFIX):])
                    transmit(Direction.SERVER_TO_CLIENT, server.send_application_data(bytes(size)))

    loop.at(start, lambda: transmit(Direction.CLIENT_TO_SERVER, client.step()))
    loop.run()

    report.timeline = throughput_timeline(arrivals, window)
    report.client_phase = client.phase
    report.server_phase = server.phase
    report.established_sni = client.established_sni
    report.fell_back = client.fell_back
    if report.error is None and not client.established:
        report.error = f"HandshakeIncomplete: client stopped in {client._step.value}"
    if payload_bytes == 0 and report.error is None:
        report.completed_at = max(report.handshake_durations.values(), default=None)
    return report
