import hashlib
import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import frames
from veil import crypto
from veil.crypto import (
    SUITE_NULL,
    SUITE_X25519_CHACHA20_POLY1305_SHA256 as REAL,
    AuthFailure,
    Direction,
    MalformedPublicValue,
    UnknownSuite,
)
from veil.wire import ContentType, PayloadTooLarge, RecordFrame, encode_record

C2S, S2C = Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT


def fresh_keys(suite=REAL, seed=0):
    rng = random.Random(seed)
    rand = lambda n: bytes(rng.getrandbits(8) for _ in range(n))  # noqa: E731
    return crypto.derive_channel_keys(rand(32), rand(32), rand(32), rand(32), suite)


def pair(suite=REAL, seed=0):
    return fresh_keys(suite, seed), fresh_keys(suite, seed)


def test_keypair_determinism():
    assert crypto.keypair_generate(REAL, 5) == crypto.keypair_generate(REAL, 5)
    assert len(crypto.keypair_generate(REAL, 5).public_part) == crypto.PUBLIC_LEN


def test_keypair_distinct_seeds():
    publics = {crypto.keypair_generate(REAL, i).public_part for i in range(100)}
    assert len(publics) == 100


def test_keypair_unseeded_is_random():
    assert crypto.keypair_generate(REAL) != crypto.keypair_generate(REAL)


def test_unknown_suite():
    with pytest.raises(UnknownSuite):
        crypto.keypair_generate(0x1234)
    with pytest.raises(UnknownSuite):
        crypto.derive_channel_keys(b"s", b"h", b"c", b"r", 0x1234)


def test_shared_secret_symmetry():
    a, b = crypto.keypair_generate(REAL), crypto.keypair_generate(REAL)
    secret = crypto.shared_secret(a, b.public_part)
    assert secret == crypto.shared_secret(b, a.public_part)
    assert len(secret) == 32 and secret != bytes(32)


def test_shared_secret_truncated_public():
    a, b = crypto.keypair_generate(REAL, 1), crypto.keypair_generate(REAL, 2)
    with pytest.raises(MalformedPublicValue):
        crypto.shared_secret(a, b.public_part[:-1])


def test_shared_secret_low_order_point():
    a = crypto.keypair_generate(REAL, 1)
    with pytest.raises(MalformedPublicValue):
        crypto.shared_secret(a, bytes(64))


def test_null_suite_secret():
    a, b = crypto.keypair_generate(SUITE_NULL, 1), crypto.keypair_generate(SUITE_NULL, 2)
    assert crypto.shared_secret(a, b.public_part) == bytes(32)
    real = crypto.keypair_generate(REAL, 3)
    assert crypto.shared_secret(real, b.public_part, SUITE_NULL) == bytes(32)


def test_derive_is_deterministic():
    assert fresh_keys(seed=3).same_keys(fresh_keys(seed=3))
    assert not fresh_keys(seed=3).same_keys(fresh_keys(seed=4))


def test_derive_bit_flips_never_collide():
    rng = random.Random(11)
    secret, th, cr, sr = (bytes(rng.getrandbits(8) for _ in range(32)) for _ in range(4))
    base = crypto.derive_channel_keys(secret, th, cr, sr)
    by_secret = {secret: base.client_write_key + base.server_write_key}
    for _ in range(1000):
        bit = rng.randrange(256)
        flipped = bytearray(secret)
        flipped[bit // 8] ^= 1 << (bit % 8)
        keys = crypto.derive_channel_keys(bytes(flipped), th, cr, sr)
        by_secret[bytes(flipped)] = keys.client_write_key + keys.server_write_key
    # distinct secrets map to distinct key blocks
    assert len(set(by_secret.values())) == len(by_secret)


def test_all_single_bit_flips_give_distinct_keys():
    rng = random.Random(12)
    secret, th, cr, sr = (bytes(rng.getrandbits(8) for _ in range(32)) for _ in range(4))
    blocks = set()
    for bit in range(256):
        flipped = bytearray(secret)
        flipped[bit // 8] ^= 1 << (bit % 8)
        keys = crypto.derive_channel_keys(bytes(flipped), th, cr, sr)
        blocks.add(keys.client_write_key + keys.server_write_key)
    base = crypto.derive_channel_keys(secret, th, cr, sr)
    blocks.add(base.client_write_key + base.server_write_key)
    assert len(blocks) == 257


def test_derive_binds_transcript_and_randoms():
    base = fresh_keys()
    k = crypto.derive_channel_keys(b"s" * 32, b"h" * 32, b"c" * 32, b"r" * 32)
    for args in ((b"s" * 32, b"H" * 32, b"c" * 32, b"r" * 32), (b"s" * 32, b"h" * 32, b"C" * 32, b"r" * 32),
                 (b"s" * 32, b"h" * 32, b"c" * 32, b"R" * 32)):
        assert not crypto.derive_channel_keys(*args).same_keys(k)
    assert base.client_write_key != base.server_write_key


def test_null_suite_keys_are_constants():
    keys = fresh_keys(SUITE_NULL)
    assert keys.client_write_key == crypto.NULL_CLIENT_WRITE_KEY
    assert keys.server_write_key == crypto.NULL_SERVER_WRITE_KEY
    assert keys.same_keys(fresh_keys(SUITE_NULL, seed=99))


def test_seal_open_round_trip():
    tx, rx = pair()
    frame = RecordFrame(ContentType.HANDSHAKE, b"\x14\x00\x00\x0c" + bytes(12))
    sealed = crypto.seal_record(tx, C2S, frame)
    assert sealed.content_type == ContentType.APPLICATION_DATA
    assert len(sealed.payload) == len(frame.payload) + 1 + crypto.TAG_LEN
    assert crypto.open_record(rx, C2S, sealed) == frame
    assert tx.client_seq == rx.client_seq == 1
    assert tx.server_seq == rx.server_seq == 0


def test_seal_matches_reference_aead():
    # recompute the first sealed record directly with the AEAD primitive
    from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

    keys = fresh_keys()
    frame = RecordFrame(ContentType.HANDSHAKE, b"hello")
    sealed = crypto.seal_record(keys, S2C, frame)
    inner = b"hello" + bytes([22])
    aad = bytes([23, 3, 3]) + (len(inner) + 16).to_bytes(2, "big")
    expected = ChaCha20Poly1305(fresh_keys().server_write_key).encrypt(bytes(12), inner, aad)
    assert sealed.payload == expected


def test_bit_flip_fails_authentication():
    tx, rx = pair()
    sealed = crypto.seal_record(tx, C2S, RecordFrame(ContentType.APPLICATION_DATA, b"payload"))
    bad = bytearray(sealed.payload)
    bad[3] ^= 0x10
    with pytest.raises(AuthFailure):
        crypto.open_record(rx, C2S, RecordFrame(ContentType.APPLICATION_DATA, bytes(bad)))
    # the failed attempt did not consume a sequence number
    assert crypto.open_record(rx, C2S, sealed).payload == b"payload"


def test_wrong_direction_fails():
    tx, rx = pair()
    sealed = crypto.seal_record(tx, C2S, RecordFrame(ContentType.APPLICATION_DATA, b"x"))
    with pytest.raises(AuthFailure):
        crypto.open_record(rx, S2C, sealed)


def test_outer_type_must_be_application_data():
    tx, rx = pair()
    sealed = crypto.seal_record(tx, C2S, RecordFrame(ContentType.HANDSHAKE, b"x"))
    with pytest.raises(AuthFailure):
        crypto.open_record(rx, C2S, RecordFrame(ContentType.HANDSHAKE, sealed.payload))


def test_misordered_records_fail():
    tx, rx = pair()
    first = crypto.seal_record(tx, C2S, RecordFrame(ContentType.APPLICATION_DATA, b"1"))
    second = crypto.seal_record(tx, C2S, RecordFrame(ContentType.APPLICATION_DATA, b"2"))
    with pytest.raises(AuthFailure):
        crypto.open_record(rx, C2S, second)
    assert crypto.open_record(rx, C2S, first).payload == b"1"
    assert crypto.open_record(rx, C2S, second).payload == b"2"
    with pytest.raises(AuthFailure):
        crypto.open_record(rx, C2S, first)


def test_sequence_exhausted():
    keys = fresh_keys()
    keys.client_seq = crypto.MAX_SEQUENCE
    with pytest.raises(crypto.SequenceExhausted):
        crypto.seal_record(keys, C2S, RecordFrame(ContentType.APPLICATION_DATA, b""))


def test_sealed_size_limit():
    keys = fresh_keys()
    crypto.seal_record(keys, C2S, RecordFrame(ContentType.APPLICATION_DATA, bytes(crypto.MAX_SEALED_PLAINTEXT)))
    with pytest.raises(PayloadTooLarge):
        crypto.seal_record(keys, C2S, RecordFrame(ContentType.APPLICATION_DATA, bytes(crypto.MAX_SEALED_PLAINTEXT + 1)))


def test_null_suite_is_identity():
    tx, rx = pair(SUITE_NULL)
    frame = RecordFrame(ContentType.HANDSHAKE, b"abc")
    sealed = crypto.seal_record(tx, C2S, frame)
    assert sealed.payload == b"abc\x16"
    assert crypto.open_record(rx, C2S, sealed) == frame


@settings(max_examples=200)
@given(frames.filter(lambda f: len(f.payload) <= crypto.MAX_SEALED_PLAINTEXT), st.sampled_from(list(Direction)))
def test_seal_open_property(frame, direction):
    tx, rx = pair(seed=5)
    sealed = crypto.seal_record(tx, direction, frame)
    assert sealed.payload[: len(frame.payload)] != frame.payload or not frame.payload
    assert crypto.open_record(rx, direction, sealed) == frame


@settings(max_examples=200)
@given(st.binary(min_size=8, max_size=2000))
def test_no_plaintext_leak(plaintext):
    keys = fresh_keys(seed=6)
    wire_bytes = encode_record(crypto.seal_record(keys, C2S, RecordFrame(ContentType.HANDSHAKE, plaintext)))
    assert plaintext not in wire_bytes


def test_sign_verify():
    kp = crypto.keypair_generate(REAL, 1)
    sig = crypto.sign(kp, b"message")
    assert crypto.verify(kp.public_part, b"message", sig)
    assert not crypto.verify(kp.public_part, b"other", sig)
    assert not crypto.verify(crypto.keypair_generate(REAL, 2).public_part, b"message", sig)


@pytest.mark.parametrize("sig", [b"", b"\x00" * 64, os.urandom(64), os.urandom(10)])
def test_verify_never_raises(sig):
    kp = crypto.keypair_generate(REAL, 1)
    assert crypto.verify(kp.public_part, b"m", sig) is False
    assert crypto.verify(b"short", b"m", sig) is False


def test_finished_binds_label_and_transcript():
    args = (b"s" * 32, b"c" * 32, b"r" * 32)
    a = crypto.finished_verify_data(*args, b"client finished", hashlib.sha256(b"t").digest())
    assert len(a) == 12
    assert a != crypto.finished_verify_data(*args, b"server finished", hashlib.sha256(b"t").digest())
    assert a != crypto.finished_verify_data(*args, b"client finished", hashlib.sha256(b"u").digest())
