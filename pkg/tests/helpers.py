"""Generators and fixed data shared by the test modules."""

import random
import string
from datetime import datetime, timedelta, timezone

from hypothesis import strategies as st

from veil import wire
from veil.certs import CertStore, generate_self_signed
from veil.crypto import REGISTERED_SUITES

EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


def fixed_clock(when=EPOCH + timedelta(days=1)):
    return lambda: when


def make_store(seed="fixture", *named, default="front.example", not_before=EPOCH):
    named = named or ("video.example",)
    return CertStore.build(
        generate_self_signed(default, 30, rng_seed=seed, not_before=not_before),
        *(generate_self_signed(n, 30, rng_seed=seed, not_before=not_before) for n in named),
    )


# random host names and messages, shared by property tests and the acceptance suite

_LABEL = string.ascii_lowercase + string.digits


def random_host(rng: random.Random) -> str:
    labels = ["".join(rng.choice(_LABEL) for _ in range(rng.randint(1, 12))) for _ in range(rng.randint(1, 4))]
    host = ".".join(labels)
    if host.replace(".", "").isdigit():
        host += ".example"
    return host


def _bytes(rng, n):
    return bytes(rng.getrandbits(8) for _ in range(n))


def _extensions(rng):
    exts = [wire.Extension(rng.randrange(1, 0x10000), _bytes(rng, rng.randint(0, 20)))
            for _ in range(rng.randint(0, 3))]
    if rng.random() < 0.5:
        exts.insert(rng.randint(0, len(exts)), wire.encode_sni_extension(random_host(rng)))
    return tuple(exts)


def random_message(rng: random.Random):
    kind = rng.randrange(6)
    if kind == 0:
        return wire.ClientHello(_bytes(rng, 32), tuple(rng.randrange(0x10000) for _ in range(rng.randint(1, 5))),
                                _bytes(rng, rng.randint(0, 32)), _extensions(rng))
    if kind == 1:
        return wire.ServerHello(_bytes(rng, 32), rng.randrange(0x10000), _bytes(rng, rng.randint(0, 32)),
                                _extensions(rng) if rng.random() < 0.3 else ())
    if kind == 2:
        return wire.CertificatePayload(_bytes(rng, rng.randint(0, 300)))
    if kind == 3:
        return wire.ServerHelloDone()
    if kind == 4:
        return wire.ClientKeyExchange(_bytes(rng, rng.randint(0, 100)))
    return wire.Finished(_bytes(rng, 12))


def random_frame(rng: random.Random) -> wire.RecordFrame:
    return wire.RecordFrame(rng.choice(list(wire.ContentType)), _bytes(rng, rng.randint(0, 400)))


# hypothesis strategies

hosts = st.from_regex(r"[a-z0-9]{1,10}(\.[a-z0-9]{1,10}){0,3}", fullmatch=True).filter(
    lambda h: not h.replace(".", "").isdigit()
)
extensions = st.lists(
    st.builds(wire.Extension, st.integers(1, 0xFFFF), st.binary(max_size=40)), max_size=4
).map(tuple)
client_hellos = st.builds(
    wire.ClientHello,
    st.binary(min_size=32, max_size=32),
    st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=8).map(tuple),
    st.binary(max_size=32),
    extensions,
)
messages = st.one_of(
    client_hellos,
    st.builds(wire.ServerHello, st.binary(min_size=32, max_size=32), st.integers(0, 0xFFFF), st.binary(max_size=32),
              extensions),
    st.builds(wire.CertificatePayload, st.binary(max_size=600)),
    st.just(wire.ServerHelloDone()),
    st.builds(wire.ClientKeyExchange, st.binary(max_size=200)),
    st.builds(wire.Finished, st.binary(min_size=12, max_size=12)),
)
frames = st.builds(wire.RecordFrame, st.sampled_from(list(wire.ContentType)), st.binary(max_size=600))
suites = st.sampled_from(REGISTERED_SUITES)


_TLDS = ("com", "net", "org", "io", "tv", "example")


def random_site(rng: random.Random) -> str:
    """Plausible service name; long enough that chance matches in random bytes are negligible."""
    labels = ["".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(3, 12)))
              for _ in range(rng.randint(1, 3))]
    return ".".join(labels + [rng.choice(_TLDS)])
