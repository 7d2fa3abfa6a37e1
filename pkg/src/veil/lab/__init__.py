"""Middlebox testbed: passive SNI observer, token-bucket shaper, link simulator."""

from .capture import CaptureEvent, capture_read, capture_write, replay, sniff_report
from .observer import Classification, FlowId, FlowState, Observer, observe_bytes
from .shaper import ShaperConfig, TokenBucket, shape
from .sim import LinkSim, TransferReport, VirtualClock, simulate_transfer

__all__ = [
    "CaptureEvent",
    "Classification",
    "FlowId",
    "FlowState",
    "LinkSim",
    "Observer",
    "ShaperConfig",
    "TokenBucket",
    "TransferReport",
    "VirtualClock",
    "capture_read",
    "capture_write",
    "observe_bytes",
    "replay",
    "shape",
    "simulate_transfer",
    "sniff_report",
]
