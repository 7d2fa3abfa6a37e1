"""
Two handshakes on one connection
=================================

A fronting server holds a default certificate and one named certificate.
The client opens with a ClientHello that carries no server_name, gets the
default certificate, and then repeats the handshake inside the resulting
channel, this time naming the service it wants.
"""

from veil.certs import CertStore, generate_self_signed
from veil.handshake import ClientConfig, MemoryLink, ServerConfig, run_handshake
from veil.wire import decode_record

# the server: default certificate first, then the named one
store = CertStore.build(
    generate_self_signed("front.example", 30, rng_seed=1),
    generate_self_signed("video.example", 30, rng_seed=2),
)
server_cfg = ServerConfig(store)

# masked mode is the client default; the target name stays out of the first hello
client_cfg = ClientConfig("video.example")
link = MemoryLink()
client, server, _ = run_handshake(client_cfg, server_cfg, link)

for record in client.completed:
    print(f"{record.phase.name:16s} certificate={record.subject:14s} sni={record.sni}")

###############################################################################
# What went over the wire. Everything after each side's change_cipher_spec
# is an application_data record, so the second handshake looks like any
# other traffic.

for direction, data in link.wire:
    frame, _ = decode_record(data)
    print(f"{direction.value}  {frame.content_type.name:18s} {len(data):5d} bytes")

wire_bytes = b"".join(data for _, data in link.wire)
print("target name visible on the wire:", b"video.example" in wire_bytes)

###############################################################################
# The keys from the first handshake are gone; both ends now use the keys of
# the named handshake.

print("client and server agree:", client.active_keys.same_keys(server.active_keys))
