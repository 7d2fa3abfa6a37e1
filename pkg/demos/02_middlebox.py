"""
What a passive observer sees
============================

The observer reads record headers and plaintext ClientHellos, and labels
each flow with the server_name it finds. A legacy client names its target
in the clear; a masked client never does.
"""

import os
import tempfile

from veil.certs import CertStore, generate_self_signed
from veil.handshake import ClientConfig, Mode, ServerConfig
from veil.lab import FlowId, LinkSim, capture_read, capture_write, simulate_transfer, sniff_report

store = CertStore.build(
    generate_self_signed("front.example", 30, rng_seed=1),
    generate_self_signed("video.example", 30, rng_seed=2),
)
server_cfg = ServerConfig(store)

# one flow of each kind, 200 kB download each
events = []
for number, mode in enumerate([Mode.LEGACY, Mode.MASKED]):
    report = simulate_transfer(
        ClientConfig("video.example", mode), server_cfg, None, LinkSim(), 200_000,
        flow_id=FlowId("10.0.0.2:50000", "10.0.0.1:443", number),
    )
    print(f"{mode.value:7s} live classification: {report.flow.label()}")
    events += report.capture

###############################################################################
# The capture file is plain text: time, flow, direction, raw hex and a decoded
# summary. Re-reading it offline gives the same answer as the live observer.

path = os.path.join(tempfile.mkdtemp(), "capture.tsv")
capture_write(events, path)
for line in sniff_report(capture_read(path)):
    print(line)
