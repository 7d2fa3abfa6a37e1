"""
Old servers and late handshakes
===============================

A server that cannot do the masked exchange answers the SNI-less hello with
a warning alert, and the client retries on the same connection with a
conventional hello. Separately, once a channel is up, a plaintext
ClientHello is refused.
"""

from veil.certs import CertStore, generate_self_signed
from veil.handshake import ClientConfig, MemoryLink, Mode, RenegotiationRejected, ServerConfig, run_handshake
from veil.wire import ClientHello, ContentType, RecordFrame, decode_record, encode_handshake, encode_sni_extension

store = CertStore.build(
    generate_self_signed("front.example", 30, rng_seed=1),
    generate_self_signed("video.example", 30, rng_seed=2),
)

# a legacy-only server
link = MemoryLink()
client, _, _ = run_handshake(ClientConfig("video.example"), ServerConfig(store, legacy_only=True), link)
print("fell back:", client.fell_back, "| certificate:", client.certificate.subject_name)
print("first records:", [decode_record(d)[0].content_type.name for _, d in link.wire[:3]])
print("connections opened:", link.connections_opened)

###############################################################################
# A plaintext hello after the first handshake would let an observer see the
# name after all, so the server rejects it with a fatal alert.

_, server, _ = run_handshake(ClientConfig(None, Mode.LEGACY), ServerConfig(store))
hello = ClientHello(bytes(32), (1,), b"", (encode_sni_extension("video.example"),))
try:
    server.step(RecordFrame(ContentType.HANDSHAKE, encode_handshake(hello)))
except RenegotiationRejected as exc:
    print("rejected:", exc, "| alert:", exc.alert.name)
