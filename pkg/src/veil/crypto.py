"""Cipher suites: key agreement, key schedule, record protection and signatures.

Two suites are registered:

``0x0001``  X25519 key agreement, HKDF-SHA256 key schedule, ChaCha20-Poly1305
            record protection and Ed25519 signatures.
``0x00FF``  null test suite. Key agreement yields an all-zero secret, channel
            keys are fixed constants and sealing is the identity transform, so
            protocol runs are reproducible byte for byte. Never offer it on a
            real network.
"""

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .wire import MAX_RECORD_PAYLOAD, ContentType, PayloadTooLarge, RecordFrame

SUITE_X25519_CHACHA20_POLY1305_SHA256 = 0x0001
SUITE_NULL = 0x00FF
REGISTERED_SUITES = (SUITE_X25519_CHACHA20_POLY1305_SHA256, SUITE_NULL)

PRIVATE_LEN = 32
PUBLIC_LEN = 64  # X25519 public || Ed25519 public
KEY_LEN = 32
TAG_LEN = 16
SECRET_LEN = 32
MAX_SEQUENCE = 2**64 - 1
# plaintext room inside one sealed record: inner content type byte + AEAD tag
MAX_SEALED_PLAINTEXT = MAX_RECORD_PAYLOAD - 1 - TAG_LEN

NULL_CLIENT_WRITE_KEY = bytes(KEY_LEN)
NULL_SERVER_WRITE_KEY = b"\x01" * KEY_LEN

Seed = Union[int, bytes, str]


class CryptoError(Exception):
    pass


class UnknownSuite(CryptoError):
    pass


class MalformedPublicValue(CryptoError):
    pass


class AuthFailure(CryptoError):
    pass


class SequenceExhausted(CryptoError):
    pass


class Direction(Enum):
    CLIENT_TO_SERVER = "C2S"
    SERVER_TO_CLIENT = "S2C"

    @property
    def reverse(self) -> "Direction":
        if self is Direction.CLIENT_TO_SERVER:
            return Direction.SERVER_TO_CLIENT
        return Direction.CLIENT_TO_SERVER


def _check_suite(suite: int) -> int:
    if suite not in REGISTERED_SUITES:
        raise UnknownSuite(f"cipher suite {suite:#06x} is not registered")
    return suite


def seed_bytes(seed: Seed) -> bytes:
    if isinstance(seed, int):
        return seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
    if isinstance(seed, str):
        return seed.encode("utf-8")
    return bytes(seed)


@dataclass(frozen=True)
class KeyPair:
    """Private scalar plus its public half.

    One private value serves both X25519 agreement and Ed25519 signing, each
    through its own derived subkey; ``public_part`` concatenates the two
    public keys.
    """

    suite: int
    private_part: bytes = field(repr=False)
    public_part: bytes

    @classmethod
    def from_private(cls, suite: int, private_part: bytes) -> "KeyPair":
        _check_suite(suite)
        if len(private_part) != PRIVATE_LEN:
            raise ValueError(f"private part must be {PRIVATE_LEN} bytes")
        if suite == SUITE_NULL:
            public = hashlib.sha512(b"veil null public" + private_part).digest()
        else:
            public = _x25519_key(private_part).public_key().public_bytes_raw() + (
                _ed25519_key(private_part).public_key().public_bytes_raw()
            )
        return cls(suite, bytes(private_part), public)


def _subkey(private_part: bytes, label: bytes) -> bytes:
    return hashlib.sha256(b"veil " + label + b"\x00" + private_part).digest()


def _x25519_key(private_part: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(_subkey(private_part, b"x25519"))


def _ed25519_key(private_part: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(_subkey(private_part, b"ed25519"))


def keypair_generate(suite: int, rng_seed: Optional[Seed] = None) -> KeyPair:
    _check_suite(suite)
    if rng_seed is None:
        private = os.urandom(PRIVATE_LEN)
    else:
        private = hashlib.sha256(b"veil keypair seed" + seed_bytes(rng_seed)).digest()
    return KeyPair.from_private(suite, private)


def shared_secret(mine: KeyPair, their_public: bytes, suite: Optional[int] = None) -> bytes:
    """Agree on a secret with the holder of ``their_public``.

    ``suite`` is the negotiated suite and defaults to the suite of ``mine``;
    a server whose certificate key belongs to the real suite still answers a
    null-suite negotiation with the null secret.
    """
    suite = _check_suite(mine.suite if suite is None else suite)
    if len(their_public) != PUBLIC_LEN:
        raise MalformedPublicValue(f"public value is {len(their_public)} bytes, expected {PUBLIC_LEN}")
    if suite == SUITE_NULL:
        return bytes(SECRET_LEN)
    if mine.suite == SUITE_NULL:
        raise MalformedPublicValue("null-suite key pair cannot run X25519")
    try:
        peer = X25519PublicKey.from_public_bytes(their_public[:32])
        return _x25519_key(mine.private_part).exchange(peer)
    except ValueError as exc:
        # all-zero output from a low-order point
        raise MalformedPublicValue(str(exc)) from None


# key schedule


@dataclass
class ChannelKeys:
    suite: int
    client_write_key: bytes = field(repr=False)
    server_write_key: bytes = field(repr=False)
    client_seq: int = 0
    server_seq: int = 0

    def write_key(self, direction: Direction) -> bytes:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.client_write_key
        return self.server_write_key

    def seq(self, direction: Direction) -> int:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.client_seq
        return self.server_seq

    def _advance(self, direction: Direction) -> None:
        if direction is Direction.CLIENT_TO_SERVER:
            self.client_seq += 1
        else:
            self.server_seq += 1

    def same_keys(self, other: "ChannelKeys") -> bool:
        return (
            self.suite == other.suite
            and self.client_write_key == other.client_write_key
            and self.server_write_key == other.server_write_key
        )


def _hkdf(secret: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


def transcript_hash(transcript: bytes) -> bytes:
    return hashlib.sha256(transcript).digest()


def derive_channel_keys(
    secret: bytes,
    transcript_hash: bytes,
    client_random: bytes,
    server_random: bytes,
    suite: int = SUITE_X25519_CHACHA20_POLY1305_SHA256,
) -> ChannelKeys:
    _check_suite(suite)
    if not secret or not transcript_hash or not client_random or not server_random:
        raise ValueError("key derivation inputs must be nonempty")
    if suite == SUITE_NULL:
        return ChannelKeys(suite, NULL_CLIENT_WRITE_KEY, NULL_SERVER_WRITE_KEY)
    block = _hkdf(
        secret,
        salt=client_random + server_random,
        info=b"veil key expansion" + transcript_hash,
        length=2 * KEY_LEN,
    )
    return ChannelKeys(suite, block[:KEY_LEN], block[KEY_LEN:])


def finished_verify_data(
    secret: bytes, client_random: bytes, server_random: bytes, label: bytes, transcript_hash: bytes
) -> bytes:
    """12-byte Finished value binding the handshake transcript to the agreed secret."""
    master = _hkdf(secret, salt=client_random + server_random, info=b"veil master secret", length=48)
    return hmac.new(master, label + transcript_hash, hashlib.sha256).digest()[:12]


# record protection


def _nonce(seq: int) -> bytes:
    return b"\x00\x00\x00\x00" + struct.pack("!Q", seq)


def _sealed_header(length: int, version) -> bytes:
    return struct.pack("!BBBH", ContentType.APPLICATION_DATA, version[0], version[1], length)


def seal_record(keys: ChannelKeys, direction: Direction, frame: RecordFrame) -> RecordFrame:
    """Protect ``frame`` as an application_data record and advance the send counter."""
    seq = keys.seq(direction)
    if seq >= MAX_SEQUENCE:
        raise SequenceExhausted(direction.value)
    if len(frame.payload) > MAX_SEALED_PLAINTEXT:
        raise PayloadTooLarge(f"{len(frame.payload)} bytes do not fit one sealed record")
    inner = frame.payload + bytes([frame.content_type])
    if keys.suite == SUITE_NULL:
        payload = inner
    else:
        aad = _sealed_header(len(inner) + TAG_LEN, frame.version)
        payload = ChaCha20Poly1305(keys.write_key(direction)).encrypt(_nonce(seq), inner, aad)
    keys._advance(direction)
    return RecordFrame(ContentType.APPLICATION_DATA, payload, frame.version)


def open_record(keys: ChannelKeys, direction: Direction, frame: RecordFrame) -> RecordFrame:
    """Inverse of :func:`seal_record`; the receive counter advances only on success."""
    seq = keys.seq(direction)
    if seq >= MAX_SEQUENCE:
        raise SequenceExhausted(direction.value)
    if frame.content_type != ContentType.APPLICATION_DATA:
        raise AuthFailure(f"protected record arrived as {frame.content_type.name}")
    if keys.suite == SUITE_NULL:
        inner = frame.payload
    else:
        aad = _sealed_header(len(frame.payload), frame.version)
        try:
            inner = ChaCha20Poly1305(keys.write_key(direction)).decrypt(
                _nonce(seq), frame.payload, aad
            )
        except InvalidTag:
            raise AuthFailure(f"bad record MAC ({direction.value} seq {seq})") from None
    if not inner or inner[-1] not in ContentType._value2member_map_:
        raise AuthFailure("protected record carries no valid inner content type")
    keys._advance(direction)
    return RecordFrame(ContentType(inner[-1]), inner[:-1], frame.version)


# signatures


def sign(keypair: KeyPair, message: bytes) -> bytes:
    if keypair.suite == SUITE_NULL:
        return hashlib.sha512(b"veil null signature" + keypair.public_part + message).digest()
    return _ed25519_key(keypair.private_part).sign(message)


def verify(public_part: bytes, message: bytes, signature: bytes, suite: int = SUITE_X25519_CHACHA20_POLY1305_SHA256) -> bool:
    if len(public_part) != PUBLIC_LEN:
        return False
    if suite == SUITE_NULL:
        expected = hashlib.sha512(b"veil null signature" + public_part + message).digest()
        return hmac.compare_digest(expected, signature)
    try:
        Ed25519PublicKey.from_public_bytes(public_part[32:]).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True
