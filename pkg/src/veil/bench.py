"""Cost of the second handshake relative to a full transfer."""

import statistics
import threading
from dataclasses import asdict, dataclass
from typing import List, Optional

from .certs import CertStore, generate_self_signed
from .crypto import Direction
from .handshake import ClientConfig, Mode, ServerConfig
from .lab.capture import CaptureEvent
from .lab.sim import LinkSim, simulate_transfer

HUNDRED_MEGABITS = 100_000_000 // 8


@dataclass
class BenchReport:
    payload_bytes: int
    wall_time_legacy: float
    wall_time_masked: float
    extra_handshake_fraction: float
    extra_handshake_bytes: int
    extra_flights: int
    repeats: int
    clock: str

    @property
    def extra_byte_fraction(self) -> float:
        return self.extra_handshake_bytes / self.payload_bytes if self.payload_bytes else float("inf")

    def as_dict(self) -> dict:
        data = asdict(self)
        data["extra_byte_fraction"] = self.extra_byte_fraction
        return data


def count_flights(events: List[CaptureEvent]) -> int:
    """Runs of consecutive same-direction records."""
    flights = 0
    last: Optional[Direction] = None
    for event in events:
        if event.direction is not last:
            flights += 1
            last = event.direction
    return flights


def bench_store(seed: int = 0) -> CertStore:
    return CertStore.build(
        generate_self_signed("front.example", 30, rng_seed=f"bench-front-{seed}"),
        generate_self_signed("video.example", 30, rng_seed=f"bench-video-{seed}"),
    )


def _fraction(legacy: float, masked: float) -> float:
    return max(0.0, (masked - legacy) / masked) if masked > 0 else 0.0


def run_bench(
    payload_bytes: int = HUNDRED_MEGABITS,
    repeats: int = 3,
    capacity_bps: float = 10e6,
    delay_ms: float = 10.0,
    seed: int = 0,
    sni: str = "video.example",
) -> BenchReport:
    """Median transfer time of legacy vs masked runs on the simulated link."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    store = bench_store(seed)
    times = {Mode.LEGACY: [], Mode.MASKED: []}
    for i in range(repeats):
        for mode in times:
            report = simulate_transfer(
                ClientConfig(sni, mode, seed=(seed, i).__repr__()),
                ServerConfig(store, seed=seed + i),
                None,
                LinkSim(capacity_bps, delay_ms),
                payload_bytes,
                record_capture=False,
            )
            if not report.ok:
                raise RuntimeError(f"{mode.value} transfer failed: {report.error}")
            times[mode].append(report.completed_at)
    # handshake-only runs give the byte and flight arithmetic
    shapes = {}
    for mode in times:
        report = simulate_transfer(ClientConfig(sni, mode, seed=seed), ServerConfig(store, seed=seed),
                                   None, LinkSim(capacity_bps, delay_ms), 0)
        shapes[mode] = (sum(len(e.raw) for e in report.capture), count_flights(report.capture))
    legacy = statistics.median(times[Mode.LEGACY])
    masked = statistics.median(times[Mode.MASKED])
    return BenchReport(
        payload_bytes=payload_bytes,
        wall_time_legacy=legacy,
        wall_time_masked=masked,
        extra_handshake_fraction=_fraction(legacy, masked),
        extra_handshake_bytes=shapes[Mode.MASKED][0] - shapes[Mode.LEGACY][0],
        extra_flights=shapes[Mode.MASKED][1] - shapes[Mode.LEGACY][1],
        repeats=repeats,
        clock="virtual",
    )


def run_wallclock_bench(payload_bytes: int = HUNDRED_MEGABITS, repeats: int = 3, seed: int = 0,
                        sni: str = "video.example") -> BenchReport:
    """Same comparison over loopback TCP with real time; noisy, not for acceptance."""
    from .net import VeilServer, connect

    store = bench_store(seed)
    server = VeilServer(("127.0.0.1", 0), ServerConfig(store))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    payload = bytes(payload_bytes)
    times = {Mode.LEGACY: [], Mode.MASKED: []}
    try:
        for _ in range(repeats):
            for mode in times:
                report = connect(host, port, ClientConfig(sni, mode), payload, timeout=60)
                if not report.ok:
                    raise RuntimeError(f"{mode.value} transfer failed: {report.error}")
                times[mode].append(report.elapsed)
    finally:
        server.drain()
    legacy = statistics.median(times[Mode.LEGACY])
    masked = statistics.median(times[Mode.MASKED])
    return BenchReport(payload_bytes, legacy, masked, _fraction(legacy, masked), 0, 0, repeats, "wall")
