"""Capture log: timestamped raw wire bytes per flow and direction.

One event per line, tab separated::

    time_us  flow  C2S|S2C  hex(raw)  summary-json

The raw hex is authoritative. The summary (record_type, handshake_type, sni)
is a convenience decoded at capture time.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from ..crypto import Direction
from ..wire import ContentType, DecodeError, HandshakeType, NeedMoreData, decode_record, find_sni, split_handshake
from .observer import FlowId, FlowState, observe_bytes


class ParseError(Exception):
    pass


@dataclass(frozen=True)
class CaptureEvent:
    time_us: int
    flow: str
    direction: Direction
    raw: bytes
    summary: Dict[str, Optional[str]] = field(default_factory=dict, compare=True)


def summarize(raw: bytes) -> Dict[str, Optional[str]]:
    """Best-effort decode of the first record in ``raw``."""
    summary: Dict[str, Optional[str]] = {"record_type": None, "handshake_type": None, "sni": None}
    try:
        frame, _ = decode_record(raw)
    except (DecodeError, NeedMoreData):
        return summary
    summary["record_type"] = frame.content_type.name.lower()
    if frame.content_type == ContentType.HANDSHAKE:
        try:
            msg, _ = split_handshake(frame.payload)[0]
        except (DecodeError, IndexError):
            return summary
        summary["handshake_type"] = HandshakeType(msg.msg_type).name.lower()
        if msg.msg_type == HandshakeType.CLIENT_HELLO:
            try:
                summary["sni"] = find_sni(msg.extensions)
            except DecodeError:
                pass
    return summary


def make_event(time_s: float, flow: Union[FlowId, str], direction: Direction, raw: bytes) -> CaptureEvent:
    return CaptureEvent(round(time_s * 1e6), str(flow), direction, bytes(raw), summarize(raw))


def format_event(event: CaptureEvent) -> str:
    summary = json.dumps(event.summary, sort_keys=True, separators=(",", ":"))
    return f"{event.time_us}\t{event.flow}\t{event.direction.value}\t{event.raw.hex()}\t{summary}\n"


def parse_event(line: str, lineno: int = 0) -> CaptureEvent:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ParseError(f"line {lineno}: expected 5 fields, got {len(parts)}")
    time_us, flow, direction, raw, summary = parts
    try:
        event = CaptureEvent(int(time_us), flow, Direction(direction), bytes.fromhex(raw), json.loads(summary))
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    if not isinstance(event.summary, dict):
        raise ParseError(f"line {lineno}: summary is not an object")
    return event


def capture_write(events: Iterable[CaptureEvent], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for event in events:
            fh.write(format_event(event))


def capture_read(path: Union[str, Path]) -> List[CaptureEvent]:
    events = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise ParseError(f"line {lineno}: truncated (no line terminator)")
            events.append(parse_event(line, lineno))
    return events


def replay(events: Iterable[CaptureEvent]) -> Dict[str, FlowState]:
    """Run the observer over a capture; flows keep their order of first appearance."""
    flows: Dict[str, FlowState] = {}
    for event in events:
        if event.flow not in flows:
            try:
                flow_id: Optional[FlowId] = FlowId.parse(event.flow)
            except ValueError:
                flow_id = None
            flows[event.flow] = FlowState(flow_id)
        observe_bytes(flows[event.flow], event.direction, event.raw, event.time_us / 1e6)
    return flows


def sniff_report(events: Iterable[CaptureEvent]) -> List[str]:
    lines = []
    for index, flow in enumerate(replay(events).values()):
        lines.append(f"flow {index}: {flow.label()}")
        lines.append(f"  records seen: {flow.records_seen}")
        sequence = ", ".join(f"{d.value}:{t.name.lower()}" for d, t in flow.plaintext_handshakes)
        lines.append(f"  plaintext handshake: {sequence or '-'}")
    return lines
