"""
Shaping by server name
======================

A token-bucket shaper limits flows it has identified as video.example to
1 Mbit/s on a 2.5 Mbit/s bottleneck. The legacy flow is caught and held at
the class rate; the masked flow is never identified and uses the whole link.
"""

from veil.certs import CertStore, generate_self_signed
from veil.handshake import ClientConfig, Mode, ServerConfig
from veil.lab import LinkSim, ShaperConfig, simulate_transfer

store = CertStore.build(
    generate_self_signed("front.example", 30, rng_seed=1),
    generate_self_signed("video.example", 30, rng_seed=2),
)
shaper = ShaperConfig({"video.example": 1e6})

reports = {}
for mode in Mode:
    reports[mode] = simulate_transfer(
        ClientConfig("video.example", mode), ServerConfig(store), shaper,
        LinkSim(capacity_bps=2.5e6), 4_000_000, record_capture=False,
    )

###############################################################################
# Throughput per one-second window of virtual time, as a crude bar chart.

for mode, report in reports.items():
    print(f"{mode.value}: {report.flow.label()}, done after {report.completed_at:.1f} s")
    for t, bps in report.timeline:
        print(f"  {t:5.0f} s {bps / 1e6:5.2f} Mbit/s " + "#" * round(bps / 1e5))
    print(f"  steady state {report.steady_state_throughput() / 1e6:.3f} Mbit/s")
