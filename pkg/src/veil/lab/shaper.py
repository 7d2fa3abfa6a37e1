"""Classification-keyed token-bucket shaper acting on whole records."""

from dataclasses import dataclass, field
from typing import Mapping

from ..wire import MAX_RECORD_PAYLOAD, RECORD_HEADER_LEN
from .observer import Classification, FlowState

MIN_BUCKET_DEPTH = RECORD_HEADER_LEN + MAX_RECORD_PAYLOAD


@dataclass(frozen=True)
class ShaperConfig:
    class_rates: Mapping[str, float] = field(default_factory=dict)
    default_rate: float = 1e9
    bucket_depth: int = 2 * MIN_BUCKET_DEPTH

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_rates", dict(self.class_rates))
        if self.default_rate <= 0 or any(rate <= 0 for rate in self.class_rates.values()):
            raise ValueError("shaping rates must be positive")
        if self.bucket_depth < MIN_BUCKET_DEPTH:
            raise ValueError(f"bucket depth must hold one full record ({MIN_BUCKET_DEPTH} bytes)")

    def rate_for(self, flow: FlowState) -> float:
        if flow.classification is Classification.IDENTIFIED and flow.sni in self.class_rates:
            return self.class_rates[flow.sni]
        return self.default_rate


@dataclass
class TokenBucket:
    depth: int
    tokens: float
    updated: float = 0.0

    def release(self, size: int, now: float, rate_bps: float) -> float:
        """Earliest time a ``size``-byte record may leave; records leave in FIFO order."""
        t = max(now, self.updated)
        self.tokens = min(self.depth, self.tokens + (t - self.updated) * rate_bps / 8)
        if self.tokens < size:
            t += (size - self.tokens) * 8 / rate_bps
            self.tokens = size
        self.tokens -= size
        self.updated = t
        return t


def shape(cfg: ShaperConfig, flow: FlowState, packet_len: int, now: float) -> float:
    """Release time for a record of ``packet_len`` bytes on ``flow``."""
    if flow.bucket is None:
        flow.bucket = TokenBucket(cfg.bucket_depth, cfg.bucket_depth, now)
    return flow.bucket.release(packet_len, now, cfg.rate_for(flow))


def parse_rate(text: str) -> float:
    """``"1M"``, ``"2.5Mbps"``, ``"800k"`` or a plain bits-per-second number."""
    value = text.strip().lower()
    for suffix in ("bps", "bit/s", "b/s"):
        if value.endswith(suffix):
            value = value[: -len(suffix)]
    scale = {"k": 1e3, "m": 1e6, "g": 1e9}.get(value[-1:], 1.0)
    if scale != 1.0:
        value = value[:-1]
    rate = float(value) * scale
    if rate <= 0:
        raise ValueError(f"rate must be positive: {text!r}")
    return rate


def parse_rate_map(text: str) -> dict:
    """Read ``host rate`` lines; ``#`` starts a comment."""
    rates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'host rate'")
        rates[parts[0]] = parse_rate(parts[1])
    return rates
