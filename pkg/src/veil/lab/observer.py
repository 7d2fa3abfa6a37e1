"""Passive SNI-extracting flow classifier.

The observer sees raw bytes in both directions of a flow, reassembles TLS
records and reads the first plaintext ClientHello, as a DPI box would. It
never alters or drops traffic.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from ..crypto import Direction
from ..wire import (
    HANDSHAKE_HEADER_LEN,
    ContentType,
    DecodeError,
    HandshakeType,
    NeedMoreData,
    decode_handshake,
    decode_record,
    find_sni,
)

REASSEMBLY_BUDGET = 16 * 1024


class Classification(Enum):
    PENDING = "pending"
    IDENTIFIED = "identified"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class FlowId:
    client: str
    server: str
    number: int = 0

    def __str__(self) -> str:
        return f"{self.client},{self.server},{self.number}"

    @classmethod
    def parse(cls, text: str) -> "FlowId":
        client, server, number = text.rsplit(",", 2)
        return cls(client, server, int(number))


@dataclass
class _DirectionState:
    buffer: bytearray = field(default_factory=bytearray)
    handshake_buffer: bytearray = field(default_factory=bytearray)
    bytes_seen: int = 0
    cipher_started: bool = False
    desynced: bool = False


@dataclass
class FlowState:
    flow: Optional[FlowId] = None
    classification: Classification = Classification.PENDING
    sni: Optional[str] = None
    records_seen: int = 0
    client_hellos: int = 0
    sni_extensions: int = 0
    plaintext_handshakes: List[Tuple[Direction, HandshakeType]] = field(default_factory=list)
    bytes_forwarded: int = 0
    first_byte_time: Optional[float] = None
    last_byte_time: Optional[float] = None
    # token bucket state, owned by the shaper
    bucket: Optional[object] = None
    _directions: Dict[Direction, _DirectionState] = field(
        default_factory=lambda: {d: _DirectionState() for d in Direction}, repr=False
    )

    @property
    def pending(self) -> bool:
        return self.classification is Classification.PENDING

    def _identify(self, sni: str) -> None:
        if self.pending:
            self.classification = Classification.IDENTIFIED
            self.sni = sni

    def _give_up(self) -> None:
        if self.pending:
            self.classification = Classification.UNKNOWN

    def label(self) -> str:
        if self.classification is Classification.IDENTIFIED:
            return f"IDENTIFIED {self.sni}"
        if self.classification is Classification.UNKNOWN:
            return (
                f"UNKNOWN ({self.client_hellos} plaintext ClientHello, "
                f"{self.sni_extensions} SNI)"
            )
        return "PENDING"


def _on_handshake_bytes(flow: FlowState, direction: Direction, state: _DirectionState, payload: bytes) -> None:
    state.handshake_buffer += payload
    buf = state.handshake_buffer
    while len(buf) >= HANDSHAKE_HEADER_LEN:
        length = int.from_bytes(buf[1:4], "big")
        end = HANDSHAKE_HEADER_LEN + length
        if len(buf) < end:
            if len(buf) > REASSEMBLY_BUDGET:
                flow._give_up()
                state.desynced = True
            return
        raw = bytes(buf[:end])
        del buf[:end]
        try:
            msg_type = HandshakeType(raw[0])
        except ValueError:
            flow._give_up()
            continue
        flow.plaintext_handshakes.append((direction, msg_type))
        if msg_type is HandshakeType.CLIENT_HELLO and direction is Direction.CLIENT_TO_SERVER:
            flow.client_hellos += 1
            try:
                sni = find_sni(decode_handshake(raw).extensions)
            except DecodeError:
                flow._give_up()
                continue
            if sni is not None:
                flow.sni_extensions += 1
                flow._identify(sni)


def observe_bytes(flow: FlowState, direction: Direction, data: bytes, now: float) -> FlowState:
    """Feed bytes seen on the wire into ``flow`` and update its classification."""
    if flow.first_byte_time is None:
        flow.first_byte_time = now
    flow.last_byte_time = now
    state = flow._directions[direction]
    state.bytes_seen += len(data)
    if state.desynced:
        return flow
    state.buffer += data
    while True:
        try:
            frame, used = decode_record(state.buffer)
        except NeedMoreData:
            break
        except DecodeError:
            flow._give_up()
            state.desynced = True
            state.buffer.clear()
            return flow
        del state.buffer[:used]
        flow.records_seen += 1
        if frame.content_type == ContentType.HANDSHAKE and not state.cipher_started:
            _on_handshake_bytes(flow, direction, state, frame.payload)
        elif frame.content_type == ContentType.CHANGE_CIPHER_SPEC:
            state.cipher_started = True
            flow._give_up()
        elif frame.content_type == ContentType.APPLICATION_DATA:
            flow._give_up()
    if flow.pending and flow.client_hellos == 0 and state.bytes_seen > REASSEMBLY_BUDGET:
        flow._give_up()
    return flow


class Observer:
    """Flow table keyed by :class:`FlowId`."""

    def __init__(self) -> None:
        self.flows: Dict[FlowId, FlowState] = {}

    def flow(self, flow_id: FlowId) -> FlowState:
        if flow_id not in self.flows:
            self.flows[flow_id] = FlowState(flow_id)
        return self.flows[flow_id]

    def observe(self, flow_id: FlowId, direction: Direction, data: bytes, now: float) -> FlowState:
        return observe_bytes(self.flow(flow_id), direction, data, now)
