"""Self-signed certificates and the SNI-keyed certificate store.

A :class:`CertificateDoc` is a deliberately small stand-in for an X.509
certificate. It travels on the wire in a compact binary form
(:meth:`CertificateDoc.to_bytes`) and lives on disk in a line-oriented text
form::

    role: default
    subject: front.example
    not_before: 2026-10-18T00:00:00Z
    not_after: 2026-11-17T00:00:00Z
    serial: 1234567890
    public: <hex>
    signature: <hex>
    private: <hex>

Blocks are separated by blank lines and the default entry comes first. The
``private`` line is present only in store files.
"""

import logging
import random
import secrets
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple, Union

from . import crypto
from .crypto import KeyPair, Seed
from .wire import InvalidHostName, validate_host_name

logger = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
_TBS_MAGIC = b"VEILCERT1"


class CertError(Exception):
    pass


class InvalidSubject(CertError):
    pass


class NotFound(CertError, KeyError):
    pass


class MissingDefaultCertificate(CertError):
    pass


class ParseError(CertError):
    pass


class CertStatus(Enum):
    VALID = "valid"
    NAME_MISMATCH = "name_mismatch"
    EXPIRED = "expired"
    BAD_SIGNATURE = "bad_signature"


def _utc_seconds(when: datetime) -> int:
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return int(when.timestamp())


def _from_seconds(value: int) -> datetime:
    return datetime.fromtimestamp(value, tz=timezone.utc)


@dataclass(frozen=True)
class CertificateDoc:
    subject_name: str
    public_part: bytes
    not_before: datetime
    not_after: datetime
    serial: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        """The signed portion: every field except the signature."""
        subject = self.subject_name.encode("utf-8")
        return (
            _TBS_MAGIC
            + struct.pack("!H", len(subject))
            + subject
            + struct.pack("!qqQ", _utc_seconds(self.not_before), _utc_seconds(self.not_after), self.serial)
            + struct.pack("!H", len(self.public_part))
            + self.public_part
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + struct.pack("!H", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "CertificateDoc":
        try:
            if not data.startswith(_TBS_MAGIC):
                raise ValueError("bad magic")
            pos = len(_TBS_MAGIC)

            def take(n: int) -> bytes:
                nonlocal pos
                if pos + n > len(data):
                    raise ValueError("truncated")
                chunk = data[pos : pos + n]
                pos += n
                return chunk

            subject = take(struct.unpack("!H", take(2))[0]).decode("utf-8")
            not_before, not_after, serial = struct.unpack("!qqQ", take(24))
            public = take(struct.unpack("!H", take(2))[0])
            signature = take(struct.unpack("!H", take(2))[0])
            if pos != len(data):
                raise ValueError("trailing bytes")
            return cls(subject, public, _from_seconds(not_before), _from_seconds(not_after), serial, signature)
        except (ValueError, OverflowError, OSError, struct.error) as exc:
            raise ParseError(f"malformed certificate: {exc}") from None


def generate_self_signed(
    subject: str,
    validity_days: int = 30,
    rng_seed: Optional[Seed] = None,
    not_before: Optional[datetime] = None,
) -> Tuple[CertificateDoc, KeyPair]:
    """Create a key pair and a certificate for ``subject`` signed by that key.

    The window starts at ``not_before``, by default the start of the current
    UTC day, so that seeded calls made on the same day are byte-identical.
    """
    try:
        validate_host_name(subject)
    except InvalidHostName as exc:
        raise InvalidSubject(str(exc)) from None
    if validity_days <= 0:
        raise ValueError("validity_days must be positive")
    if not_before is None:
        now = datetime.now(timezone.utc)
        not_before = now.replace(hour=0, minute=0, second=0, microsecond=0)
    not_before = _from_seconds(_utc_seconds(not_before))
    if rng_seed is None:
        keypair = crypto.keypair_generate(crypto.SUITE_X25519_CHACHA20_POLY1305_SHA256)
        serial = secrets.randbits(64)
    else:
        keypair = crypto.keypair_generate(
            crypto.SUITE_X25519_CHACHA20_POLY1305_SHA256, crypto.seed_bytes(rng_seed) + subject.encode()
        )
        serial = random.Random(crypto.seed_bytes(rng_seed)).getrandbits(64)
    doc = CertificateDoc(
        subject_name=subject,
        public_part=keypair.public_part,
        not_before=not_before,
        not_after=not_before + timedelta(days=validity_days),
        serial=serial,
    )
    return replace(doc, signature=crypto.sign(keypair, doc.tbs_bytes())), keypair


def validate_certificate(
    doc: CertificateDoc, expected_name: Optional[str] = None, now: Optional[datetime] = None
) -> CertStatus:
    """Check signature, validity window and subject, in that order."""
    if not crypto.verify(doc.public_part, doc.tbs_bytes(), doc.signature):
        return CertStatus.BAD_SIGNATURE
    if now is None:
        now = datetime.now(timezone.utc)
    elif now.tzinfo is None:
        now = now.replace(tzinfo=timezone.utc)
    if not doc.not_before <= now <= doc.not_after or doc.not_before >= doc.not_after:
        return CertStatus.EXPIRED
    if expected_name is not None and doc.subject_name != expected_name:
        return CertStatus.NAME_MISMATCH
    return CertStatus.VALID


# store


@dataclass(frozen=True)
class CertEntry:
    doc: CertificateDoc
    keypair: KeyPair = field(repr=False)


@dataclass(frozen=True)
class CertStore:
    """Default certificate plus named certificates; read-only once built."""

    default: CertEntry
    named: Mapping[str, CertEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.default is None:
            raise MissingDefaultCertificate("a certificate store needs a default certificate")
        for name, entry in self.named.items():
            if entry.doc.subject_name != name:
                raise ValueError(f"store key {name!r} holds a certificate for {entry.doc.subject_name!r}")
        object.__setattr__(self, "named", MappingProxyType(dict(self.named)))

    @classmethod
    def build(cls, default: Tuple[CertificateDoc, KeyPair], *named: Tuple[CertificateDoc, KeyPair]) -> "CertStore":
        entries = {doc.subject_name: CertEntry(doc, kp) for doc, kp in named}
        return cls(CertEntry(*default), entries)

    def subjects(self) -> List[str]:
        return [self.default.doc.subject_name, *self.named]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CertStore):
            return NotImplemented
        return self.default == other.default and dict(self.named) == dict(other.named)


def store_lookup(store: CertStore, name: Optional[str]) -> CertEntry:
    """Absent name selects the default; otherwise exact subject match only."""
    if name is None:
        return store.default
    entry = store.named.get(name)
    if entry is not None:
        return entry
    if store.default.doc.subject_name == name:
        return store.default
    raise NotFound(name)


def format_entry(entry: CertEntry, role: Optional[str], with_private: bool) -> str:
    doc = entry.doc
    lines = []
    if role:
        lines.append(f"role: {role}")
    lines += [
        f"subject: {doc.subject_name}",
        f"not_before: {doc.not_before.strftime(TIME_FORMAT)}",
        f"not_after: {doc.not_after.strftime(TIME_FORMAT)}",
        f"serial: {doc.serial}",
        f"public: {doc.public_part.hex()}",
        f"signature: {doc.signature.hex()}",
    ]
    if with_private:
        lines.append(f"private: {entry.keypair.private_part.hex()}")
    return "\n".join(lines) + "\n"


def format_store(store: CertStore) -> str:
    blocks = [format_entry(store.default, "default", True)]
    blocks += [format_entry(entry, "named", True) for entry in store.named.values()]
    return "\n".join(blocks)


def format_certificate(doc: CertificateDoc) -> str:
    return format_entry(CertEntry(doc, None), None, False)


_REQUIRED = ("subject", "not_before", "not_after", "serial", "public", "signature")


def _parse_block(lines: List[str], lineno: int) -> Tuple[Optional[str], CertEntry]:
    fields: Dict[str, str] = {}
    for offset, line in enumerate(lines):
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseError(f"line {lineno + offset}: expected 'key: value'")
        key = key.strip()
        if key in fields:
            raise ParseError(f"line {lineno + offset}: duplicate field {key!r}")
        fields[key] = value.strip()
    missing = [k for k in _REQUIRED if k not in fields]
    if missing:
        raise ParseError(f"block at line {lineno}: missing {', '.join(missing)}")
    unknown = set(fields) - set(_REQUIRED) - {"role", "private"}
    if unknown:
        raise ParseError(f"block at line {lineno}: unknown field(s) {', '.join(sorted(unknown))}")
    try:
        doc = CertificateDoc(
            subject_name=fields["subject"],
            public_part=bytes.fromhex(fields["public"]),
            not_before=datetime.strptime(fields["not_before"], TIME_FORMAT).replace(tzinfo=timezone.utc),
            not_after=datetime.strptime(fields["not_after"], TIME_FORMAT).replace(tzinfo=timezone.utc),
            serial=int(fields["serial"]),
            signature=bytes.fromhex(fields["signature"]),
        )
        if not 0 <= doc.serial < 2**64:
            raise ValueError("serial out of range")
        keypair = None
        if "private" in fields:
            keypair = KeyPair.from_private(
                crypto.SUITE_X25519_CHACHA20_POLY1305_SHA256, bytes.fromhex(fields["private"])
            )
            if keypair.public_part != doc.public_part:
                raise ValueError("private key does not match the public key")
    except ValueError as exc:
        raise ParseError(f"block at line {lineno}: {exc}") from None
    role = fields.get("role")
    if role not in (None, "default", "named"):
        raise ParseError(f"block at line {lineno}: unknown role {role!r}")
    return role, CertEntry(doc, keypair)


def parse_entries(text: str) -> List[Tuple[Optional[str], CertEntry]]:
    """Parse every block of a certificate or store file, without store checks."""
    entries = []
    block: List[str] = []
    start = 1
    for lineno, raw in enumerate(text.splitlines() + [""], start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if line:
            if not block:
                start = lineno
            block.append(line)
        elif block:
            entries.append(_parse_block(block, start))
            block = []
    return entries


def parse_store(text: str) -> CertStore:
    entries = parse_entries(text)
    if not entries or entries[0][0] != "default":
        raise MissingDefaultCertificate("the first block of a store must be the default certificate")
    named = {}
    for position, (role, entry) in enumerate(entries):
        if entry.keypair is None:
            raise ParseError(f"entry {entry.doc.subject_name!r} has no private key")
        if position and role == "default":
            raise ParseError("more than one default certificate")
        if position:
            if entry.doc.subject_name in named:
                raise ParseError(f"duplicate subject {entry.doc.subject_name!r}")
            named[entry.doc.subject_name] = entry
    return CertStore(entries[0][1], named)


def store_save(store: CertStore, path: Union[str, Path]) -> None:
    Path(path).write_text(format_store(store), encoding="ascii")


def store_load(path: Union[str, Path]) -> CertStore:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return parse_store(text)


# default-certificate reuse is allowed but worth flagging
_default_users: Dict[bytes, set] = {}


def note_default_in_use(store: CertStore) -> None:
    """Warn when stores with different contents share one default certificate."""
    key = store.default.doc.public_part
    fingerprint = tuple(sorted((name, e.doc.public_part) for name, e in store.named.items()))
    users = _default_users.setdefault(key, set())
    if fingerprint in users:
        return
    users.add(fingerprint)
    if len(users) > 1:
        logger.warning(
            "default certificate %r is shared by %d differently configured servers",
            store.default.doc.subject_name,
            len(users),
        )
