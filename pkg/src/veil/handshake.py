"""Client and server handshake state machines with SNI masking.

A masked connection runs two complete handshakes over one transport:

1. a plaintext handshake whose ClientHello carries no server_name, answered
   with the server's default certificate;
2. a second handshake carrying the real server_name, sent entirely as sealed
   application_data records under the keys from step 1. Its Finished
   exchange replaces the channel keys with keys bound to the named
   certificate.

A legacy connection is the ordinary single handshake with plaintext SNI.
"""

import logging
import os
import random
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum, IntEnum
from typing import Callable, Deque, List, Optional, Sequence, Tuple

from . import crypto
from .certs import (
    CertEntry,
    CertificateDoc,
    CertStatus,
    CertStore,
    NotFound,
    ParseError,
    note_default_in_use,
    store_lookup,
    validate_certificate,
)
from .crypto import ChannelKeys, Direction, Seed
from .wire import (
    TLS_VERSION_1_2,
    CertificatePayload,
    ClientHello,
    ClientKeyExchange,
    ContentType,
    DecodeError,
    Finished,
    HandshakeMessage,
    RecordFrame,
    RecordReader,
    ServerHello,
    ServerHelloDone,
    encode_handshake,
    encode_record,
    encode_sni_extension,
    split_handshake,
    validate_host_name,
)

logger = logging.getLogger(__name__)

CHANGE_CIPHER_SPEC_PAYLOAD = b"\x01"
APPLICATION_CHUNK = 8192


class HandshakePhase(IntEnum):
    PLAIN = 0
    FIRST_COMPLETE = 1
    SECOND_COMPLETE = 2


class Mode(Enum):
    MASKED = "masked"
    LEGACY = "legacy"


class Role(Enum):
    CLIENT = "client"
    SERVER = "server"


class AlertLevel(IntEnum):
    WARNING = 1
    FATAL = 2


class AlertDescription(IntEnum):
    CLOSE_NOTIFY = 0
    UNEXPECTED_MESSAGE = 10
    BAD_RECORD_MAC = 20
    HANDSHAKE_FAILURE = 40
    BAD_CERTIFICATE = 42
    CERTIFICATE_EXPIRED = 45
    ILLEGAL_PARAMETER = 47
    DECODE_ERROR = 50
    DECRYPT_ERROR = 51
    PROTOCOL_VERSION = 70
    NO_RENEGOTIATION = 100
    UNRECOGNIZED_NAME = 112


# Sent at warning level in answer to an SNI-less first ClientHello by a server
# that only runs legacy handshakes. Shares its number with unrecognized_name,
# which is always fatal here.
MASKED_HANDSHAKE_UNSUPPORTED = 0x70


@dataclass(frozen=True)
class AlertMessage:
    level: AlertLevel
    code: int

    @property
    def fatal(self) -> bool:
        return self.level == AlertLevel.FATAL

    @property
    def is_fallback(self) -> bool:
        return self.level == AlertLevel.WARNING and self.code == MASKED_HANDSHAKE_UNSUPPORTED

    @property
    def name(self) -> str:
        if self.is_fallback:
            return "masked_handshake_unsupported"
        try:
            return AlertDescription(self.code).name.lower()
        except ValueError:
            return f"alert_{self.code}"

    def to_bytes(self) -> bytes:
        return bytes([self.level, self.code])

    @classmethod
    def from_bytes(cls, data: bytes) -> "AlertMessage":
        if len(data) != 2 or data[0] not in (AlertLevel.WARNING, AlertLevel.FATAL):
            raise DecodeError(f"malformed alert {data.hex()}")
        return cls(AlertLevel(data[0]), data[1])


def fatal(code: AlertDescription) -> AlertMessage:
    return AlertMessage(AlertLevel.FATAL, code)


class HandshakeError(Exception):
    """A failure that ends the connection; ``alert`` is what the peer is told.

    ``outgoing`` holds the records (normally the alert) the failing endpoint
    still owes its peer.
    """

    default_alert = AlertDescription.HANDSHAKE_FAILURE

    def __init__(self, message: str = "", alert: Optional[AlertMessage] = None) -> None:
        super().__init__(message or self.__class__.__name__)
        self.alert = alert if alert is not None else fatal(self.default_alert)
        self.outgoing: List[RecordFrame] = []


class ProtocolViolation(HandshakeError):
    default_alert = AlertDescription.UNEXPECTED_MESSAGE


class RenegotiationRejected(ProtocolViolation):
    default_alert = AlertDescription.NO_RENEGOTIATION


class CertificateRejected(HandshakeError):
    default_alert = AlertDescription.BAD_CERTIFICATE

    def __init__(self, message: str = "", status: Optional[CertStatus] = None) -> None:
        code = AlertDescription.BAD_CERTIFICATE
        if status is CertStatus.EXPIRED:
            code = AlertDescription.CERTIFICATE_EXPIRED
        super().__init__(message, fatal(code))
        self.status = status


class FinishedMismatch(HandshakeError):
    default_alert = AlertDescription.DECRYPT_ERROR


class RecordAuthFailure(HandshakeError):
    default_alert = AlertDescription.BAD_RECORD_MAC


class MalformedMessage(HandshakeError):
    default_alert = AlertDescription.DECODE_ERROR


class HandshakeFailure(HandshakeError):
    default_alert = AlertDescription.HANDSHAKE_FAILURE


class PeerAlert(HandshakeError):
    def __init__(self, alert: AlertMessage) -> None:
        super().__init__(f"peer sent {alert.name} ({alert.code:#04x})", alert)


class InvalidPhase(Exception):
    pass


class HandshakeIncomplete(Exception):
    pass


class GuardDecision(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


# configuration


@dataclass(frozen=True)
class ClientConfig:
    target_sni: Optional[str] = None
    mode: Mode = Mode.MASKED
    suites: Tuple[int, ...] = (crypto.SUITE_X25519_CHACHA20_POLY1305_SHA256,)
    expect_front_name: Optional[str] = None
    seed: Optional[Seed] = None
    clock: Optional[Callable[[], datetime]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "suites", tuple(self.suites))
        if self.target_sni is not None:
            validate_host_name(self.target_sni)
        if self.mode is Mode.MASKED and self.target_sni is None:
            raise ValueError("masked mode needs a target SNI")
        if not self.suites:
            raise ValueError("at least one cipher suite is required")


@dataclass(frozen=True)
class ServerConfig:
    cert_store: CertStore
    legacy_only: bool = False
    suites: Tuple[int, ...] = (crypto.SUITE_X25519_CHACHA20_POLY1305_SHA256,)
    seed: Optional[Seed] = None
    clock: Optional[Callable[[], datetime]] = None

    def __post_init__(self) -> None:
        if not isinstance(self.cert_store, CertStore):
            raise TypeError("cert_store must be a CertStore")
        object.__setattr__(self, "suites", tuple(self.suites))
        note_default_in_use(self.cert_store)


# the two SNI rules


def client_sni_policy(phase: HandshakePhase, cfg: ClientConfig, fell_back: bool = False) -> Optional[str]:
    """SNI to place in the next ClientHello; None means the extension is absent."""
    if cfg.mode is Mode.LEGACY or fell_back:
        return cfg.target_sni
    if phase == HandshakePhase.PLAIN:
        return None
    return cfg.target_sni


def server_select_certificate(store: CertStore, offered: Optional[str], under_tunnel: bool) -> CertEntry:
    if offered is None:
        if under_tunnel:
            raise HandshakeFailure(
                "second handshake carries no server_name", fatal(AlertDescription.UNRECOGNIZED_NAME)
            )
        return store.default
    try:
        return store_lookup(store, offered)
    except NotFound:
        raise HandshakeFailure(
            f"no certificate for {offered!r}", fatal(AlertDescription.UNRECOGNIZED_NAME)
        ) from None


def resumption_guard(state: "Connection", offered_sni: Optional[str], sealed: bool = True) -> GuardDecision:
    """Decide whether a handshake request on an established connection may proceed.

    The sealed handshake that immediately follows an SNI-less first handshake
    is a fresh negotiation rather than a resumption, so a server_name that
    differs from the default certificate is fine. Anything else is refused.
    """
    if state.phase == HandshakePhase.PLAIN:
        return GuardDecision.ACCEPT
    if not sealed:
        return GuardDecision.REJECT
    if state.phase == HandshakePhase.FIRST_COMPLETE and state.established_sni is None:
        logger.debug("accepting in-tunnel handshake for %r", offered_sni)
        return GuardDecision.ACCEPT
    return GuardDecision.REJECT


def legacy_fallback(server_cfg: ServerConfig, first_hello: ClientHello) -> Optional[AlertMessage]:
    """Return cause for a legacy-only server, or None to proceed normally."""
    if server_cfg.legacy_only and first_hello.server_name is None:
        return AlertMessage(AlertLevel.WARNING, MASKED_HANDSHAKE_UNSUPPORTED)
    return None


def rekey_apply(state: "Connection", new_keys: ChannelKeys, new_cert: CertificateDoc, new_sni: str) -> "Connection":
    if state.phase != HandshakePhase.FIRST_COMPLETE:
        raise InvalidPhase(f"cannot rekey in phase {state.phase.name}")
    state.active_keys = new_keys
    state._read_keys = new_keys
    state._write_keys = new_keys
    state.certificate = new_cert
    state.established_sni = new_sni
    state.phase = HandshakePhase.SECOND_COMPLETE
    return state


# connections


class _Step(Enum):
    IDLE = "idle"
    WAIT_CLIENT_HELLO = "wait_client_hello"
    WAIT_SERVER_HELLO = "wait_server_hello"
    WAIT_CERTIFICATE = "wait_certificate"
    WAIT_SERVER_HELLO_DONE = "wait_server_hello_done"
    WAIT_CLIENT_KEY_EXCHANGE = "wait_client_key_exchange"
    WAIT_CHANGE_CIPHER_SPEC = "wait_change_cipher_spec"
    WAIT_FINISHED = "wait_finished"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class _Pending:
    """Bookkeeping for the handshake in flight."""

    client_random: bytes = b""
    server_random: bytes = b""
    offered_suites: Tuple[int, ...] = ()
    suite: Optional[int] = None
    offered_sni: Optional[str] = None
    entry: Optional[CertEntry] = None
    peer_certificate: Optional[CertificateDoc] = None
    secret: bytes = b""
    keys: Optional[ChannelKeys] = None


@dataclass
class PhaseRecord:
    phase: HandshakePhase
    subject: str
    sni: Optional[str]
    suite: int


class Connection:
    role: Role

    def __init__(self, seed: Optional[Seed], clock: Optional[Callable[[], datetime]]) -> None:
        self.phase = HandshakePhase.PLAIN
        self.transcript = bytearray()
        self.active_keys: Optional[ChannelKeys] = None
        self.established_sni: Optional[str] = None
        self.certificate: Optional[CertificateDoc] = None
        self.pending = _Pending()
        self.received = bytearray()
        self.completed: List[PhaseRecord] = []
        self.fell_back = False
        self.peer_closed = False
        self._read_keys: Optional[ChannelKeys] = None
        self._write_keys: Optional[ChannelKeys] = None
        self._step = _Step.IDLE
        self._out: List[RecordFrame] = []
        self._clock = clock
        self._rng = random.Random(crypto.seed_bytes(seed) + self.role.value.encode()) if seed is not None else None

    # plumbing

    @property
    def _send_direction(self) -> Direction:
        return Direction.CLIENT_TO_SERVER if self.role is Role.CLIENT else Direction.SERVER_TO_CLIENT

    @property
    def closed(self) -> bool:
        return self._step is _Step.CLOSED

    def _now(self) -> datetime:
        return self._clock() if self._clock else datetime.now(timezone.utc)

    def _random_bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n) if self._rng else os.urandom(n)

    def _protect(self, frame: RecordFrame) -> RecordFrame:
        if self._write_keys is None:
            return frame
        return crypto.seal_record(self._write_keys, self._send_direction, frame)

    def _send_handshake(self, msg: HandshakeMessage) -> None:
        raw = encode_handshake(msg)
        self.transcript += raw
        self._out.append(self._protect(RecordFrame(ContentType.HANDSHAKE, raw)))

    def _send_change_cipher_spec(self) -> None:
        self._out.append(self._protect(RecordFrame(ContentType.CHANGE_CIPHER_SPEC, CHANGE_CIPHER_SPEC_PAYLOAD)))
        self._write_keys = self.pending.keys

    def _reset_handshake(self) -> None:
        self.transcript = bytearray()
        self.pending = _Pending()

    def _transcript_hash(self) -> bytes:
        return crypto.transcript_hash(bytes(self.transcript))

    def _finished(self, label: bytes) -> bytes:
        p = self.pending
        return crypto.finished_verify_data(
            p.secret, p.client_random, p.server_random, label, self._transcript_hash()
        )

    def alert_frames(self, alert: AlertMessage) -> List[RecordFrame]:
        return [self._protect(RecordFrame(ContentType.ALERT, alert.to_bytes()))]

    @property
    def sealed_inbound(self) -> bool:
        return self._read_keys is not None

    # receiving

    def step(self, incoming: Optional[RecordFrame] = None) -> List[RecordFrame]:
        self._out = []
        try:
            if self._step is _Step.CLOSED:
                raise ProtocolViolation("connection is closed")
            if incoming is None:
                self._start()
            else:
                self._receive(incoming)
        except HandshakeError as exc:
            if not isinstance(exc, PeerAlert):
                try:
                    exc.outgoing = self.alert_frames(exc.alert)
                except crypto.CryptoError:
                    exc.outgoing = []
            self._step = _Step.CLOSED
            raise
        out, self._out = self._out, []
        return out

    def _start(self) -> None:
        raise ProtocolViolation(f"{self.role.value} cannot start a handshake")

    def _receive(self, frame: RecordFrame) -> None:
        if frame.version != TLS_VERSION_1_2:
            raise ProtocolViolation(f"record version {frame.version}")
        sealed = frame.content_type == ContentType.APPLICATION_DATA
        if self._read_keys is not None:
            if not sealed:
                self._plaintext_while_protected(frame)
            try:
                frame = crypto.open_record(self._read_keys, self._send_direction.reverse, frame)
            except crypto.CryptoError as exc:
                raise RecordAuthFailure(str(exc)) from None
        elif sealed:
            raise ProtocolViolation("application data before any keys were agreed")

        if frame.content_type == ContentType.ALERT:
            try:
                alert = AlertMessage.from_bytes(frame.payload)
            except DecodeError as exc:
                raise MalformedMessage(str(exc)) from None
            self._on_alert(alert)
        elif frame.content_type == ContentType.CHANGE_CIPHER_SPEC:
            if frame.payload != CHANGE_CIPHER_SPEC_PAYLOAD:
                raise MalformedMessage("malformed change_cipher_spec")
            if self._step is not _Step.WAIT_CHANGE_CIPHER_SPEC:
                raise ProtocolViolation(f"change_cipher_spec in state {self._step.value}")
            self._read_keys = self.pending.keys
            self._step = _Step.WAIT_FINISHED
        elif frame.content_type == ContentType.HANDSHAKE:
            try:
                messages = split_handshake(frame.payload)
            except DecodeError as exc:
                raise MalformedMessage(str(exc)) from None
            if not messages:
                raise MalformedMessage("empty handshake record")
            for msg, raw in messages:
                self._on_handshake(msg, raw, sealed)
        else:
            self._on_application_data(frame.payload)

    def _plaintext_while_protected(self, frame: RecordFrame) -> None:
        raise ProtocolViolation(f"plaintext {frame.content_type.name} on a protected channel")

    def _on_alert(self, alert: AlertMessage) -> None:
        if alert.level == AlertLevel.WARNING and alert.code == AlertDescription.CLOSE_NOTIFY:
            self.peer_closed = True
            return
        raise PeerAlert(alert)

    def _on_application_data(self, data: bytes) -> None:
        if self._step is not _Step.ESTABLISHED:
            raise ProtocolViolation("application data during a handshake")
        self.received += data

    def _on_handshake(self, msg: HandshakeMessage, raw: bytes, sealed: bool) -> None:
        raise NotImplementedError

    def _complete(self, subject_doc: CertificateDoc) -> None:
        p = self.pending
        if self.phase == HandshakePhase.PLAIN:
            self.phase = HandshakePhase.FIRST_COMPLETE
            self.active_keys = p.keys
            self.certificate = subject_doc
            self.established_sni = p.offered_sni
        else:
            rekey_apply(self, p.keys, subject_doc, p.offered_sni)
        self.completed.append(PhaseRecord(self.phase, subject_doc.subject_name, p.offered_sni, p.suite))
        logger.debug(
            "%s handshake complete",
            self.role.value,
            extra={"event": "phase_complete", "role": self.role.value, "phase": self.phase.name,
                   "subject": subject_doc.subject_name, "sni": p.offered_sni},
        )
        self._step = _Step.ESTABLISHED

    # application data

    @property
    def established(self) -> bool:
        return self._step is _Step.ESTABLISHED

    def send_application_data(self, data: bytes) -> List[RecordFrame]:
        if not self.established:
            raise ProtocolViolation("handshake not complete")
        return [
            self._protect(RecordFrame(ContentType.APPLICATION_DATA, data[i : i + APPLICATION_CHUNK]))
            for i in range(0, len(data), APPLICATION_CHUNK)
        ]

    def take_received(self) -> bytes:
        data = bytes(self.received)
        self.received.clear()
        return data

    def close(self) -> List[RecordFrame]:
        frames = self.alert_frames(AlertMessage(AlertLevel.WARNING, AlertDescription.CLOSE_NOTIFY))
        self._step = _Step.CLOSED
        return frames


class ClientConnection(Connection):
    role = Role.CLIENT

    def __init__(self, cfg: ClientConfig) -> None:
        self.cfg = cfg
        super().__init__(cfg.seed, cfg.clock)

    @property
    def established(self) -> bool:
        if self._step is not _Step.ESTABLISHED:
            return False
        # a masked client is only done once the named handshake has finished
        return self.phase == HandshakePhase.SECOND_COMPLETE or self.established_sni is not None or (
            self.cfg.mode is Mode.LEGACY
        )

    def _start(self) -> None:
        if self._step is not _Step.IDLE:
            raise ProtocolViolation("handshake already started")
        self._send_client_hello()

    def _send_client_hello(self) -> None:
        self._reset_handshake()
        p = self.pending
        p.offered_sni = client_sni_policy(self.phase, self.cfg, self.fell_back)
        p.client_random = self._random_bytes(32)
        p.offered_suites = self.cfg.suites
        extensions = (encode_sni_extension(p.offered_sni),) if p.offered_sni is not None else ()
        self._send_handshake(
            ClientHello(
                random=p.client_random,
                cipher_suites=p.offered_suites,
                session_id=self._random_bytes(32),
                extensions=extensions,
            )
        )
        self._step = _Step.WAIT_SERVER_HELLO

    def _on_alert(self, alert: AlertMessage) -> None:
        if alert.is_fallback:
            if (
                self._step is _Step.WAIT_SERVER_HELLO
                and self.phase == HandshakePhase.PLAIN
                and self.pending.offered_sni is None
                and self.cfg.target_sni is not None
                and not self.fell_back
            ):
                logger.info("server asked for a legacy handshake", extra={"event": "fallback"})
                self.fell_back = True
                self._send_client_hello()
                return
            raise ProtocolViolation("unexpected masked_handshake_unsupported alert")
        super()._on_alert(alert)

    def _on_handshake(self, msg: HandshakeMessage, raw: bytes, sealed: bool) -> None:
        p = self.pending
        if isinstance(msg, ServerHello) and self._step is _Step.WAIT_SERVER_HELLO:
            if msg.server_version != TLS_VERSION_1_2:
                raise HandshakeFailure("server version", fatal(AlertDescription.PROTOCOL_VERSION))
            if msg.chosen_suite not in p.offered_suites:
                raise HandshakeFailure("server chose a suite that was not offered",
                                       fatal(AlertDescription.ILLEGAL_PARAMETER))
            if msg.extensions:
                raise HandshakeFailure("unsolicited ServerHello extensions",
                                       fatal(AlertDescription.ILLEGAL_PARAMETER))
            self.transcript += raw
            p.server_random = msg.random
            p.suite = msg.chosen_suite
            self._step = _Step.WAIT_CERTIFICATE
        elif isinstance(msg, CertificatePayload) and self._step is _Step.WAIT_CERTIFICATE:
            self.transcript += raw
            try:
                doc = CertificateDoc.from_bytes(msg.cert_bytes)
            except ParseError as exc:
                raise CertificateRejected(str(exc)) from None
            expected = p.offered_sni if p.offered_sni is not None else self.cfg.expect_front_name
            status = validate_certificate(doc, expected, self._now())
            if status is not CertStatus.VALID:
                raise CertificateRejected(
                    f"certificate for {doc.subject_name!r}: {status.value}", status
                )
            p.peer_certificate = doc
            self._step = _Step.WAIT_SERVER_HELLO_DONE
        elif isinstance(msg, ServerHelloDone) and self._step is _Step.WAIT_SERVER_HELLO_DONE:
            self.transcript += raw
            ephemeral = crypto.keypair_generate(p.suite, self._random_bytes(32) if self._rng else None)
            try:
                p.secret = crypto.shared_secret(ephemeral, p.peer_certificate.public_part, p.suite)
            except crypto.CryptoError as exc:
                raise HandshakeFailure(str(exc), fatal(AlertDescription.ILLEGAL_PARAMETER)) from None
            self._send_handshake(ClientKeyExchange(ephemeral.public_part))
            p.keys = crypto.derive_channel_keys(
                p.secret, self._transcript_hash(), p.client_random, p.server_random, p.suite
            )
            self._send_change_cipher_spec()
            self._send_handshake(Finished(self._finished(b"client finished")))
            self._step = _Step.WAIT_CHANGE_CIPHER_SPEC
        elif isinstance(msg, Finished) and self._step is _Step.WAIT_FINISHED:
            if msg.verify_data != self._finished(b"server finished"):
                raise FinishedMismatch("server Finished does not match the transcript")
            self.transcript += raw
            self._complete(p.peer_certificate)
            if self.phase == HandshakePhase.FIRST_COMPLETE and self.established_sni is None and (
                self.cfg.mode is Mode.MASKED
            ):
                self._send_client_hello()
        else:
            raise ProtocolViolation(f"{type(msg).__name__} in state {self._step.value}")


class ServerConnection(Connection):
    role = Role.SERVER

    def __init__(self, cfg: ServerConfig) -> None:
        self.cfg = cfg
        super().__init__(cfg.seed, cfg.clock)
        self._step = _Step.WAIT_CLIENT_HELLO
        self.fallback_alerts = 0

    def _plaintext_while_protected(self, frame: RecordFrame) -> None:
        if frame.content_type == ContentType.HANDSHAKE and self._step is _Step.ESTABLISHED:
            if resumption_guard(self, None, sealed=False) is GuardDecision.REJECT:
                raise RenegotiationRejected("plaintext handshake on an established channel")
        super()._plaintext_while_protected(frame)

    def _on_handshake(self, msg: HandshakeMessage, raw: bytes, sealed: bool) -> None:
        p = self.pending
        if isinstance(msg, ClientHello) and self._step in (_Step.WAIT_CLIENT_HELLO, _Step.ESTABLISHED):
            self._on_client_hello(msg, raw, sealed)
        elif isinstance(msg, ClientKeyExchange) and self._step is _Step.WAIT_CLIENT_KEY_EXCHANGE:
            try:
                p.secret = crypto.shared_secret(p.entry.keypair, msg.key_share, p.suite)
            except crypto.CryptoError as exc:
                raise HandshakeFailure(str(exc), fatal(AlertDescription.ILLEGAL_PARAMETER)) from None
            self.transcript += raw
            p.keys = crypto.derive_channel_keys(
                p.secret, self._transcript_hash(), p.client_random, p.server_random, p.suite
            )
            self._step = _Step.WAIT_CHANGE_CIPHER_SPEC
        elif isinstance(msg, Finished) and self._step is _Step.WAIT_FINISHED:
            if msg.verify_data != self._finished(b"client finished"):
                raise FinishedMismatch("client Finished does not match the transcript")
            self.transcript += raw
            self._send_change_cipher_spec()
            self._send_handshake(Finished(self._finished(b"server finished")))
            self._complete(p.entry.doc)
        else:
            raise ProtocolViolation(f"{type(msg).__name__} in state {self._step.value}")

    def _on_client_hello(self, hello: ClientHello, raw: bytes, sealed: bool) -> None:
        try:
            offered = hello.server_name
        except DecodeError as exc:
            raise MalformedMessage(str(exc)) from None
        if self._step is _Step.ESTABLISHED:
            if resumption_guard(self, offered, sealed) is GuardDecision.REJECT:
                raise RenegotiationRejected(f"refusing another handshake (phase {self.phase.name})")
        if hello.client_version != TLS_VERSION_1_2:
            raise HandshakeFailure("client version", fatal(AlertDescription.PROTOCOL_VERSION))
        if self.phase == HandshakePhase.PLAIN:
            alert = legacy_fallback(self.cfg, hello)
            if alert is not None:
                self.fallback_alerts += 1
                if self.fallback_alerts > 1:
                    raise HandshakeFailure("client repeated an SNI-less hello after fallback")
                self._out.extend(self.alert_frames(alert))
                return
        under_tunnel = self.phase != HandshakePhase.PLAIN
        entry = server_select_certificate(self.cfg.cert_store, offered, under_tunnel)
        suite = next((s for s in hello.cipher_suites if s in self.cfg.suites), None)
        if suite is None:
            raise HandshakeFailure("no cipher suite in common")

        self._reset_handshake()
        p = self.pending
        self.transcript += raw
        p.client_random = hello.random
        p.server_random = self._random_bytes(32)
        p.offered_suites = hello.cipher_suites
        p.suite = suite
        p.offered_sni = offered
        p.entry = entry
        self._send_handshake(ServerHello(random=p.server_random, chosen_suite=suite, session_id=self._random_bytes(32)))
        self._send_handshake(CertificatePayload(entry.doc.to_bytes()))
        self._send_handshake(ServerHelloDone())
        self._step = _Step.WAIT_CLIENT_KEY_EXCHANGE


def client_step(state: ClientConnection, incoming: Optional[RecordFrame] = None) -> Tuple[ClientConnection, List[RecordFrame]]:
    return state, state.step(incoming)


def server_step(state: ServerConnection, incoming: RecordFrame) -> Tuple[ServerConnection, List[RecordFrame]]:
    return state, state.step(incoming)


# in-memory transport


Tamper = Callable[[Direction, int, bytes], bytes]


class MemoryLink:
    """Ordered, lossless in-memory byte pipe between one client and one server.

    Every write is logged as it appeared on the wire, which makes the link a
    capture point. ``tamper`` may rewrite the n-th write in flight.
    """

    def __init__(self, tamper: Optional[Tamper] = None) -> None:
        self.wire: List[Tuple[Direction, bytes]] = []
        self.connections_opened = 0
        self._queue: Deque[Tuple[Direction, bytes]] = deque()
        self._tamper = tamper
        self._readers = {d: RecordReader() for d in Direction}

    def open(self) -> None:
        self.connections_opened += 1

    def send(self, direction: Direction, frames: Sequence[RecordFrame]) -> None:
        for frame in frames:
            data = encode_record(frame)
            if self._tamper is not None:
                data = self._tamper(direction, len(self.wire), data)
            self.wire.append((direction, data))
            self._queue.append((direction, data))

    def pending(self) -> bool:
        return bool(self._queue)

    def deliver(self) -> Tuple[Direction, List[RecordFrame]]:
        direction, data = self._queue.popleft()
        try:
            return direction, self._readers[direction].feed(data)
        except DecodeError as exc:
            raise MalformedMessage(f"undecodable record: {exc}") from None


def _endpoint(direction: Direction, client: Connection, server: Connection) -> Connection:
    return server if direction is Direction.CLIENT_TO_SERVER else client


def _drain_quietly(link: MemoryLink, client: Connection, server: Connection) -> None:
    while link.pending():
        try:
            direction, frames = link.deliver()
        except HandshakeError:
            continue
        for frame in frames:
            try:
                _endpoint(direction, client, server).step(frame)
            except HandshakeError:
                pass


def pump(link: MemoryLink, client: ClientConnection, server: ServerConnection) -> None:
    """Deliver everything queued on ``link`` until both sides fall silent."""
    while link.pending():
        direction, frames = link.deliver()
        receiver = _endpoint(direction, client, server)
        for frame in frames:
            try:
                out = receiver.step(frame)
            except HandshakeError as exc:
                link.send(direction.reverse, exc.outgoing)
                _drain_quietly(link, client, server)
                raise
            link.send(direction.reverse, out)


def run_handshake(
    client_cfg: ClientConfig, server_cfg: ServerConfig, link: Optional[MemoryLink] = None
) -> Tuple[ClientConnection, ServerConnection, MemoryLink]:
    link = link if link is not None else MemoryLink()
    link.open()
    client = ClientConnection(client_cfg)
    server = ServerConnection(server_cfg)
    link.send(Direction.CLIENT_TO_SERVER, client.step())
    pump(link, client, server)
    if not (client.established and server.established and client.phase == server.phase):
        raise HandshakeIncomplete(
            f"client {client._step.value}/{client.phase.name}, server {server._step.value}/{server.phase.name}"
        )
    return client, server, link


def establish_masked_channel(
    client_cfg: ClientConfig, server_cfg: ServerConfig, link: Optional[MemoryLink] = None
) -> Tuple[ClientConnection, ServerConnection]:
    """Run both handshakes of a masked connection over one in-memory link."""
    if client_cfg.mode is not Mode.MASKED:
        raise ValueError("establish_masked_channel needs a masked-mode client")
    client, server, _ = run_handshake(client_cfg, server_cfg, link)
    return client, server
