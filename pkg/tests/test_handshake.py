import copy
import random
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import EPOCH, fixed_clock, make_store
from veil import crypto, handshake
from veil.certs import CertStatus, CertStore
from veil.crypto import SUITE_NULL, SUITE_X25519_CHACHA20_POLY1305_SHA256 as REAL, Direction
from veil.handshake import (
    AlertDescription,
    AlertLevel,
    AlertMessage,
    CertificateRejected,
    ClientConfig,
    ClientConnection,
    GuardDecision,
    HandshakeError,
    HandshakeFailure,
    HandshakeIncomplete,
    HandshakePhase,
    InvalidPhase,
    MemoryLink,
    Mode,
    PeerAlert,
    ProtocolViolation,
    RecordAuthFailure,
    RenegotiationRejected,
    ServerConfig,
    ServerConnection,
)
from veil.wire import (
    ClientHello,
    ClientKeyExchange,
    ContentType,
    HandshakeType,
    RecordFrame,
    decode_record,
    encode_handshake,
    encode_sni_extension,
    split_handshake,
)

C2S, S2C = Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT
CLOCK = fixed_clock()


def client(target="video.example", mode=Mode.MASKED, **kw):
    kw.setdefault("clock", CLOCK)
    return ClientConfig(target, mode, **kw)


@pytest.fixture
def phase_one_keys(monkeypatch):
    """Copies of each endpoint's keys taken just before the second handshake replaces them."""
    seen = []
    original = handshake.rekey_apply

    def spy(state, new_keys, new_cert, new_sni):
        seen.append((state.role, copy.deepcopy(state.active_keys)))
        return original(state, new_keys, new_cert, new_sni)

    monkeypatch.setattr(handshake, "rekey_apply", spy)
    return seen


def plaintext_hellos(link):
    hellos = []
    for _, data in link.wire:
        frame, _ = decode_record(data)
        if frame.content_type == ContentType.HANDSHAKE:
            hellos += [m for m, _ in split_handshake(frame.payload) if isinstance(m, ClientHello)]
    return hellos


# the two SNI rules


def test_client_sni_policy():
    masked = client()
    assert handshake.client_sni_policy(HandshakePhase.PLAIN, masked) is None
    assert handshake.client_sni_policy(HandshakePhase.FIRST_COMPLETE, masked) == "video.example"
    assert handshake.client_sni_policy(HandshakePhase.PLAIN, client(mode=Mode.LEGACY)) == "video.example"
    assert handshake.client_sni_policy(HandshakePhase.PLAIN, masked, fell_back=True) == "video.example"


def test_server_select_certificate(store):
    assert handshake.server_select_certificate(store, None, False).doc.subject_name == "front.example"
    assert handshake.server_select_certificate(store, "video.example", True).doc.subject_name == "video.example"
    with pytest.raises(HandshakeFailure) as info:
        handshake.server_select_certificate(store, "other.example", False)
    assert info.value.alert.code == AlertDescription.UNRECOGNIZED_NAME and info.value.alert.fatal
    with pytest.raises(HandshakeFailure):
        handshake.server_select_certificate(store, None, True)


def test_config_validation():
    with pytest.raises(ValueError):
        ClientConfig(None, Mode.MASKED)
    with pytest.raises(Exception):
        ClientConfig("10.0.0.1")
    with pytest.raises(ValueError):
        ClientConfig("a.example", suites=())
    with pytest.raises(TypeError):
        ServerConfig("not a store")


# single handshakes


def test_first_handshake_agrees_on_keys(server_cfg):
    c, s, link = handshake.run_handshake(client(None, Mode.LEGACY), server_cfg)
    assert c.phase == s.phase == HandshakePhase.FIRST_COMPLETE
    assert c.active_keys.same_keys(s.active_keys)
    assert c.certificate.subject_name == "front.example"
    assert c.established_sni is None


def test_client_key_exchange_before_hello(server_cfg):
    server = ServerConnection(server_cfg)
    frame = RecordFrame(ContentType.HANDSHAKE, encode_handshake(ClientKeyExchange(bytes(64))))
    with pytest.raises(ProtocolViolation):
        server.step(frame)


def test_application_data_before_keys(server_cfg):
    with pytest.raises(ProtocolViolation):
        ServerConnection(server_cfg).step(RecordFrame(ContentType.APPLICATION_DATA, b"x"))


def test_server_cannot_start(server_cfg):
    with pytest.raises(ProtocolViolation):
        ServerConnection(server_cfg).step()


def test_step_function_shape(server_cfg):
    c = ClientConnection(client())
    state, out = handshake.client_step(c)
    assert state is c and len(out) == 1
    s = ServerConnection(server_cfg)
    state, out = handshake.server_step(s, out[0])
    assert state is s and [f.content_type for f in out] == [ContentType.HANDSHAKE] * 3


def test_expect_front_name_mismatch(server_cfg):
    with pytest.raises(CertificateRejected) as info:
        handshake.run_handshake(client(expect_front_name="wrong.example"), server_cfg)
    assert info.value.status is CertStatus.NAME_MISMATCH
    assert info.value.alert.fatal


def test_expect_front_name_match(server_cfg):
    c, _, _ = handshake.run_handshake(client(expect_front_name="front.example"), server_cfg)
    assert c.phase == HandshakePhase.SECOND_COMPLETE


def test_expired_certificate(server_cfg):
    late = client(clock=fixed_clock(EPOCH + timedelta(days=60)))
    with pytest.raises(CertificateRejected) as info:
        handshake.run_handshake(late, server_cfg)
    assert info.value.status is CertStatus.EXPIRED


def test_no_common_suite(store):
    link = MemoryLink()
    with pytest.raises(HandshakeFailure):
        handshake.run_handshake(client(suites=(SUITE_NULL,)), ServerConfig(store, clock=CLOCK), link)
    assert decode_record(link.wire[-1][1])[0].content_type == ContentType.ALERT


def test_second_handshake_wrong_certificate(store):
    # a misconfigured server that answers video.example with another name's certificate
    impostor = make_store("impostor", "music.example").named["music.example"]
    bad = CertStore(store.default, {})
    object.__setattr__(bad, "named", {"video.example": impostor})
    with pytest.raises(CertificateRejected) as info:
        handshake.run_handshake(client(), ServerConfig(bad, clock=CLOCK))
    assert info.value.status is CertStatus.NAME_MISMATCH


def test_unknown_name_in_second_handshake(server_cfg):
    link = MemoryLink()
    with pytest.raises(HandshakeFailure) as info:
        handshake.run_handshake(client("missing.example"), server_cfg, link)
    assert info.value.alert.code == AlertDescription.UNRECOGNIZED_NAME
    # the alert travels sealed; only the first hello is in the clear
    assert b"missing.example" not in b"".join(d for _, d in link.wire)


# masked channel


@pytest.mark.parametrize("suite", [REAL, SUITE_NULL])
def test_masked_channel(store, suite, phase_one_keys):
    link = MemoryLink()
    cfg = ServerConfig(store, suites=(REAL, SUITE_NULL), clock=CLOCK)
    c, s = handshake.establish_masked_channel(client(suites=(suite,)), cfg, link)
    assert c.phase == s.phase == HandshakePhase.SECOND_COMPLETE
    assert [r.subject for r in c.completed] == ["front.example", "video.example"]
    assert [r.sni for r in s.completed] == [None, "video.example"]
    assert c.established_sni == s.established_sni == "video.example"
    assert c.active_keys.same_keys(s.active_keys)
    assert link.connections_opened == 1
    assert len(phase_one_keys) == 2
    for _, old in phase_one_keys:
        if suite == REAL:
            assert not old.same_keys(c.active_keys)


def test_masked_wire_has_one_plaintext_hello(server_cfg):
    _, _, link = handshake.run_handshake(client(), server_cfg)
    hellos = plaintext_hellos(link)
    assert len(hellos) == 1 and hellos[0].extensions == ()
    assert b"video.example" not in b"".join(d for _, d in link.wire)
    # after the first change_cipher_spec each direction carries only application_data
    for direction in Direction:
        types = [d[0] for dd, d in link.wire if dd is direction]
        after = types[types.index(ContentType.CHANGE_CIPHER_SPEC) + 1:]
        assert set(after) == {ContentType.APPLICATION_DATA}


def test_masked_requires_masked_client(server_cfg):
    with pytest.raises(ValueError):
        handshake.establish_masked_channel(client(mode=Mode.LEGACY), server_cfg)


def test_legacy_client_single_handshake(server_cfg):
    c, s, link = handshake.run_handshake(client(mode=Mode.LEGACY), server_cfg)
    assert len(c.completed) == len(s.completed) == 1
    assert c.phase == HandshakePhase.FIRST_COMPLETE
    assert c.certificate.subject_name == "video.example"
    assert plaintext_hellos(link)[0].server_name == "video.example"
    assert b"video.example" in link.wire[0][1]


def test_legacy_trace_matches_classic_handshake(store):
    # under the null suite the sealed Finished records can be read off the wire
    cfg = ServerConfig(store, suites=(SUITE_NULL,), clock=CLOCK)
    _, _, link = handshake.run_handshake(client(mode=Mode.LEGACY, suites=(SUITE_NULL,)), cfg)
    trace = []
    for direction, data in link.wire:
        frame, _ = decode_record(data)
        if frame.content_type == ContentType.APPLICATION_DATA:
            frame = RecordFrame(frame.payload[-1], frame.payload[:-1])
        if frame.content_type == ContentType.HANDSHAKE:
            trace += [(direction, HandshakeType(m.msg_type)) for m, _ in split_handshake(frame.payload)]
        else:
            trace.append((direction, frame.content_type))
    assert trace == [
        (C2S, HandshakeType.CLIENT_HELLO),
        (S2C, HandshakeType.SERVER_HELLO),
        (S2C, HandshakeType.CERTIFICATE),
        (S2C, HandshakeType.SERVER_HELLO_DONE),
        (C2S, HandshakeType.CLIENT_KEY_EXCHANGE),
        (C2S, ContentType.CHANGE_CIPHER_SPEC),
        (C2S, HandshakeType.FINISHED),
        (S2C, ContentType.CHANGE_CIPHER_SPEC),
        (S2C, HandshakeType.FINISHED),
    ]


# rekey


def test_rekey_in_plain_phase(server_cfg):
    c = ClientConnection(client())
    keys = crypto.derive_channel_keys(b"s", b"h", b"c", b"r")
    doc = server_cfg.cert_store.default.doc
    with pytest.raises(InvalidPhase):
        handshake.rekey_apply(c, keys, doc, "video.example")


def test_old_keys_rejected_after_rekey(server_cfg, phase_one_keys):
    c, s = handshake.establish_masked_channel(client(), server_cfg)
    old = dict(phase_one_keys)[handshake.Role.CLIENT]
    old.client_seq = s.active_keys.client_seq
    stale = crypto.seal_record(old, C2S, RecordFrame(ContentType.APPLICATION_DATA, b"stale"))
    with pytest.raises(RecordAuthFailure):
        s.step(stale)


def test_echo_after_rekey(server_cfg):
    c, s = handshake.establish_masked_channel(client(), server_cfg)
    payload = bytes(random.Random(3).getrandbits(8) for _ in range(20000))
    for frame in c.send_application_data(payload):
        assert s.step(frame) == []
    assert s.take_received() == payload
    for frame in s.send_application_data(payload[::-1]):
        c.step(frame)
    assert c.take_received() == payload[::-1]


def test_close_notify(server_cfg):
    c, s = handshake.establish_masked_channel(client(), server_cfg)
    for frame in c.close():
        s.step(frame)
    assert s.peer_closed and c.closed


# resumption guard


def test_guard_accepts_sealed_second_handshake(server_cfg):
    _, s, _ = handshake.run_handshake(client(None, Mode.LEGACY), server_cfg)
    assert s.certificate.subject_name != "video.example"
    assert handshake.resumption_guard(s, "video.example") is GuardDecision.ACCEPT
    assert handshake.resumption_guard(s, "video.example", sealed=False) is GuardDecision.REJECT


def test_guard_rejects_third_handshake(server_cfg):
    _, s = handshake.establish_masked_channel(client(), server_cfg)
    assert handshake.resumption_guard(s, "video.example") is GuardDecision.REJECT
    assert handshake.resumption_guard(s, "other.example") is GuardDecision.REJECT


def test_guard_rejects_renegotiation_after_named_handshake(server_cfg):
    _, s, _ = handshake.run_handshake(client(mode=Mode.LEGACY), server_cfg)
    assert handshake.resumption_guard(s, "video.example") is GuardDecision.REJECT


def _hello(sni):
    exts = (encode_sni_extension(sni),) if sni else ()
    return RecordFrame(ContentType.HANDSHAKE, encode_handshake(ClientHello(bytes(32), (REAL,), b"", exts)))


@pytest.mark.parametrize("sni", [None, "video.example", "front.example"])
@pytest.mark.parametrize("setup", ["plain-first", "masked", "legacy"])
def test_plaintext_hello_after_first_phase(server_cfg, sni, setup):
    cfg = {"plain-first": client(None, Mode.LEGACY), "masked": client(), "legacy": client(mode=Mode.LEGACY)}[setup]
    _, s, _ = handshake.run_handshake(cfg, server_cfg)
    with pytest.raises(RenegotiationRejected) as info:
        s.step(_hello(sni))
    assert info.value.alert.code == AlertDescription.NO_RENEGOTIATION
    assert info.value.outgoing


def test_sealed_hello_at_second_complete(server_cfg):
    c, s = handshake.establish_masked_channel(client(), server_cfg)
    frame = crypto.seal_record(c.active_keys, C2S, _hello("video.example"))
    with pytest.raises(RenegotiationRejected):
        s.step(frame)


# legacy fallback


def test_fallback_helper():
    legacy_server = ServerConfig(make_store(), legacy_only=True)
    normal_server = ServerConfig(make_store())
    bare = ClientHello(bytes(32), (REAL,))
    named = ClientHello(bytes(32), (REAL,), b"", (encode_sni_extension("video.example"),))
    alert = handshake.legacy_fallback(legacy_server, bare)
    assert alert == AlertMessage(AlertLevel.WARNING, 0x70) and alert.is_fallback
    assert handshake.legacy_fallback(legacy_server, named) is None
    assert handshake.legacy_fallback(normal_server, bare) is None


def test_fallback_alert_bytes():
    alert = AlertMessage(AlertLevel.WARNING, handshake.MASKED_HANDSHAKE_UNSUPPORTED)
    assert alert.to_bytes() == b"\x01\x70"
    assert AlertMessage.from_bytes(b"\x01\x70").is_fallback
    assert not AlertMessage.from_bytes(b"\x02\x70").is_fallback


def test_masked_client_falls_back(store):
    cfg = ServerConfig(store, legacy_only=True, clock=CLOCK)
    link = MemoryLink()
    c, s, _ = handshake.run_handshake(client(), cfg, link)
    assert c.fell_back and link.connections_opened == 1
    assert c.certificate.subject_name == "video.example"
    assert [decode_record(d)[0].content_type for _, d in link.wire[:3]] == [
        ContentType.HANDSHAKE, ContentType.ALERT, ContentType.HANDSHAKE]
    assert decode_record(link.wire[1][1])[0].payload == b"\x01\x70"
    assert [h.server_name for h in plaintext_hellos(link)] == [None, "video.example"]


def test_legacy_client_against_legacy_server(store):
    link = MemoryLink()
    c, _, _ = handshake.run_handshake(client(mode=Mode.LEGACY), ServerConfig(store, legacy_only=True, clock=CLOCK),
                                      link)
    assert not c.fell_back
    assert all(decode_record(d)[0].content_type != ContentType.ALERT for _, d in link.wire)


def test_unexpected_fallback_alert_is_rejected(server_cfg):
    c, _ = handshake.establish_masked_channel(client(), server_cfg)
    with pytest.raises(HandshakeError):
        c.step(crypto.seal_record(copy.deepcopy(c.active_keys), S2C,
                                  RecordFrame(ContentType.ALERT, b"\x01\x70")))


# transcript binding


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 17), st.integers(0, 2**32), st.integers(0, 1000))
def test_any_tampered_frame_aborts(index, bit, seed):
    def tamper(direction, i, data):
        if i != index:
            return data
        b = bytearray(data)
        pos = bit % (len(b) * 8)
        b[pos // 8] ^= 1 << (pos % 8)
        return bytes(b)

    with pytest.raises((HandshakeError, HandshakeIncomplete)):
        handshake.run_handshake(client(seed=seed), ServerConfig(make_store(), clock=CLOCK), MemoryLink(tamper))


def test_fatal_alert_from_peer():
    c = ClientConnection(client())
    c.step()
    with pytest.raises(PeerAlert) as info:
        c.step(RecordFrame(ContentType.ALERT, b"\x02\x70"))
    assert info.value.alert.name == "unrecognized_name"
