"""Record layer, handshake message and server_name extension codecs.

Every function here is pure. Decoders accept adversarial input and only ever
return a value or raise :class:`DecodeError` / :class:`NeedMoreData`.
"""

import ipaddress
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple, Union

TLS_VERSION_1_2 = (3, 3)
MAX_RECORD_PAYLOAD = 2**14
RECORD_HEADER_LEN = 5
HANDSHAKE_HEADER_LEN = 4
MAX_HOST_NAME_LEN = 255

EXTENSION_SERVER_NAME = 0x0000
NAME_TYPE_HOST_NAME = 0x00


class WireError(Exception):
    pass


class DecodeError(WireError):
    pass


class NeedMoreData(WireError):
    pass


class PayloadTooLarge(WireError):
    pass


class InvalidHostName(WireError):
    pass


class ContentType(IntEnum):
    CHANGE_CIPHER_SPEC = 20
    ALERT = 21
    HANDSHAKE = 22
    APPLICATION_DATA = 23


class HandshakeType(IntEnum):
    CLIENT_HELLO = 1
    SERVER_HELLO = 2
    CERTIFICATE = 11
    SERVER_HELLO_DONE = 14
    CLIENT_KEY_EXCHANGE = 16
    FINISHED = 20


# record layer


@dataclass(frozen=True)
class RecordFrame:
    content_type: ContentType
    payload: bytes = b""
    version: Tuple[int, int] = TLS_VERSION_1_2

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "content_type", ContentType(self.content_type))
        except ValueError:
            raise DecodeError(f"undefined content type {self.content_type!r}") from None
        object.__setattr__(self, "payload", bytes(self.payload))
        object.__setattr__(self, "version", tuple(self.version))


def encode_record(frame: RecordFrame) -> bytes:
    if len(frame.payload) > MAX_RECORD_PAYLOAD:
        raise PayloadTooLarge(f"record payload of {len(frame.payload)} bytes")
    major, minor = frame.version
    return (
        struct.pack("!BBBH", frame.content_type, major, minor, len(frame.payload))
        + frame.payload
    )


def decode_record(stream: Union[bytes, bytearray, memoryview]) -> Tuple[RecordFrame, int]:
    """Decode one record from the front of ``stream``.

    Returns the frame and the number of bytes it occupied. Raises
    :class:`NeedMoreData` if the stream ends before the record does.
    """
    if len(stream) >= 1 and stream[0] not in ContentType._value2member_map_:
        raise DecodeError(f"undefined content type {stream[0]}")
    if len(stream) < RECORD_HEADER_LEN:
        raise NeedMoreData(RECORD_HEADER_LEN - len(stream))
    content_type, major, minor, length = struct.unpack_from("!BBBH", stream)
    if length > MAX_RECORD_PAYLOAD:
        raise DecodeError(f"record length {length} exceeds {MAX_RECORD_PAYLOAD}")
    end = RECORD_HEADER_LEN + length
    if len(stream) < end:
        raise NeedMoreData(end - len(stream))
    frame = RecordFrame(ContentType(content_type), bytes(stream[RECORD_HEADER_LEN:end]), (major, minor))
    return frame, end


class RecordReader:
    """Incremental record reassembly over a byte stream."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    def __len__(self) -> int:
        return len(self._buffer)

    def feed(self, data: bytes) -> List[RecordFrame]:
        self._buffer += data
        frames = []
        while True:
            try:
                frame, used = decode_record(self._buffer)
            except NeedMoreData:
                return frames
            del self._buffer[:used]
            frames.append(frame)


# primitive readers


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise DecodeError(f"need {n} bytes, {self.remaining} left")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def uint(self, width: int) -> int:
        return int.from_bytes(self.take(width), "big")

    def vector(self, width: int) -> bytes:
        return self.take(self.uint(width))

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")


def _vector(data: bytes, width: int) -> bytes:
    if len(data) >= 1 << (8 * width):
        raise ValueError(f"vector of {len(data)} bytes does not fit a {width}-byte length")
    return len(data).to_bytes(width, "big") + data


# extensions and SNI


@dataclass(frozen=True)
class Extension:
    extension_type: int
    extension_data: bytes = b""


def encode_extensions(extensions: Sequence[Extension]) -> bytes:
    body = b"".join(
        struct.pack("!H", ext.extension_type) + _vector(ext.extension_data, 2)
        for ext in extensions
    )
    return _vector(body, 2)


def decode_extensions(data: bytes) -> Tuple[Extension, ...]:
    reader = _Reader(data)
    extensions = []
    while reader.remaining:
        ext_type = reader.uint(2)
        extensions.append(Extension(ext_type, reader.vector(2)))
    return tuple(extensions)


def validate_host_name(name: str) -> str:
    """Return ``name`` if it is usable as a server_name, else raise InvalidHostName."""
    if not isinstance(name, str) or not name:
        raise InvalidHostName("host name is empty")
    try:
        raw = name.encode("ascii")
    except UnicodeEncodeError:
        raise InvalidHostName(f"host name {name!r} is not ASCII") from None
    if len(raw) > MAX_HOST_NAME_LEN:
        raise InvalidHostName(f"host name is {len(raw)} bytes long")
    if name.endswith("."):
        raise InvalidHostName(f"host name {name!r} has a trailing dot")
    if any(c <= 0x20 or c == 0x7F for c in raw) or "" in name.split("."):
        raise InvalidHostName(f"host name {name!r} is malformed")
    try:
        ipaddress.ip_address(name.strip("[]"))
    except ValueError:
        return name
    raise InvalidHostName(f"{name!r} is an address literal")


def encode_sni_extension(name: str) -> Extension:
    host = validate_host_name(name).encode("ascii")
    entry = struct.pack("!B", NAME_TYPE_HOST_NAME) + _vector(host, 2)
    return Extension(EXTENSION_SERVER_NAME, _vector(entry, 2))


def decode_sni_extension(ext: Extension) -> str:
    if ext.extension_type != EXTENSION_SERVER_NAME:
        raise DecodeError(f"extension type {ext.extension_type:#06x} is not server_name")
    outer = _Reader(ext.extension_data)
    reader = _Reader(outer.vector(2))
    outer.expect_end()
    name_type = reader.uint(1)
    if name_type != NAME_TYPE_HOST_NAME:
        raise DecodeError(f"unsupported server name type {name_type}")
    host = reader.vector(2)
    # a list holding more than one host_name is not allowed either
    reader.expect_end()
    try:
        return validate_host_name(host.decode("ascii"))
    except (UnicodeDecodeError, InvalidHostName) as exc:
        raise DecodeError(f"bad host name in server_name: {exc}") from None


def find_sni(extensions: Sequence[Extension]) -> Optional[str]:
    """SNI carried in an extensions list, or None when the extension is absent."""
    found = [ext for ext in extensions if ext.extension_type == EXTENSION_SERVER_NAME]
    if not found:
        return None
    if len(found) > 1:
        raise DecodeError("duplicate server_name extension")
    return decode_sni_extension(found[0])


# handshake messages


@dataclass(frozen=True)
class ClientHello:
    random: bytes
    cipher_suites: Tuple[int, ...]
    session_id: bytes = b""
    extensions: Tuple[Extension, ...] = ()
    client_version: Tuple[int, int] = TLS_VERSION_1_2

    msg_type = HandshakeType.CLIENT_HELLO

    @property
    def server_name(self) -> Optional[str]:
        return find_sni(self.extensions)


@dataclass(frozen=True)
class ServerHello:
    random: bytes
    chosen_suite: int
    session_id: bytes = b""
    extensions: Tuple[Extension, ...] = ()
    server_version: Tuple[int, int] = TLS_VERSION_1_2

    msg_type = HandshakeType.SERVER_HELLO


@dataclass(frozen=True)
class CertificatePayload:
    cert_bytes: bytes

    msg_type = HandshakeType.CERTIFICATE


@dataclass(frozen=True)
class ServerHelloDone:
    msg_type = HandshakeType.SERVER_HELLO_DONE


@dataclass(frozen=True)
class ClientKeyExchange:
    key_share: bytes

    msg_type = HandshakeType.CLIENT_KEY_EXCHANGE


@dataclass(frozen=True)
class Finished:
    verify_data: bytes

    msg_type = HandshakeType.FINISHED


HandshakeMessage = Union[
    ClientHello, ServerHello, CertificatePayload, ServerHelloDone, ClientKeyExchange, Finished
]

FINISHED_LEN = 12
RANDOM_LEN = 32
MAX_SESSION_ID_LEN = 32


def _check_hello_fields(random: bytes, session_id: bytes) -> None:
    if len(random) != RANDOM_LEN:
        raise ValueError(f"random must be {RANDOM_LEN} bytes")
    if len(session_id) > MAX_SESSION_ID_LEN:
        raise ValueError("session_id longer than 32 bytes")


def _encode_body(msg: HandshakeMessage) -> bytes:
    if isinstance(msg, ClientHello):
        _check_hello_fields(msg.random, msg.session_id)
        suites = b"".join(struct.pack("!H", s) for s in msg.cipher_suites)
        body = (
            bytes(msg.client_version)
            + msg.random
            + _vector(msg.session_id, 1)
            + _vector(suites, 2)
            + b"\x01\x00"  # compression_methods: null only
        )
        if msg.extensions:
            body += encode_extensions(msg.extensions)
        return body
    if isinstance(msg, ServerHello):
        _check_hello_fields(msg.random, msg.session_id)
        body = (
            bytes(msg.server_version)
            + msg.random
            + _vector(msg.session_id, 1)
            + struct.pack("!HB", msg.chosen_suite, 0)
        )
        if msg.extensions:
            body += encode_extensions(msg.extensions)
        return body
    if isinstance(msg, CertificatePayload):
        return _vector(msg.cert_bytes, 3)
    if isinstance(msg, ServerHelloDone):
        return b""
    if isinstance(msg, ClientKeyExchange):
        return _vector(msg.key_share, 2)
    if isinstance(msg, Finished):
        if len(msg.verify_data) != FINISHED_LEN:
            raise ValueError(f"verify_data must be {FINISHED_LEN} bytes")
        return msg.verify_data
    raise TypeError(f"not a handshake message: {msg!r}")


def encode_handshake(msg: HandshakeMessage) -> bytes:
    body = _encode_body(msg)
    return struct.pack("!B", msg.msg_type) + _vector(body, 3)


def _optional_extensions(reader: _Reader) -> Tuple[Extension, ...]:
    if not reader.remaining:
        return ()
    extensions = decode_extensions(reader.vector(2))
    reader.expect_end()
    return extensions


def _decode_body(msg_type: int, body: bytes) -> HandshakeMessage:
    reader = _Reader(body)
    if msg_type == HandshakeType.CLIENT_HELLO:
        version = tuple(reader.take(2))
        random = reader.take(RANDOM_LEN)
        session_id = reader.vector(1)
        if len(session_id) > MAX_SESSION_ID_LEN:
            raise DecodeError("session_id longer than 32 bytes")
        suites = reader.vector(2)
        if len(suites) % 2:
            raise DecodeError("odd cipher_suites length")
        if reader.vector(1) != b"\x00":
            raise DecodeError("compression methods other than null")
        return ClientHello(
            random=random,
            cipher_suites=tuple(struct.unpack(f"!{len(suites) // 2}H", suites)),
            session_id=session_id,
            extensions=_optional_extensions(reader),
            client_version=version,
        )
    if msg_type == HandshakeType.SERVER_HELLO:
        version = tuple(reader.take(2))
        random = reader.take(RANDOM_LEN)
        session_id = reader.vector(1)
        if len(session_id) > MAX_SESSION_ID_LEN:
            raise DecodeError("session_id longer than 32 bytes")
        suite = reader.uint(2)
        if reader.uint(1) != 0:
            raise DecodeError("compression method other than null")
        return ServerHello(
            random=random,
            chosen_suite=suite,
            session_id=session_id,
            extensions=_optional_extensions(reader),
            server_version=version,
        )
    if msg_type == HandshakeType.CERTIFICATE:
        msg = CertificatePayload(reader.vector(3))
    elif msg_type == HandshakeType.SERVER_HELLO_DONE:
        msg = ServerHelloDone()
    elif msg_type == HandshakeType.CLIENT_KEY_EXCHANGE:
        msg = ClientKeyExchange(reader.vector(2))
    elif msg_type == HandshakeType.FINISHED:
        msg = Finished(reader.take(FINISHED_LEN))
    else:
        raise DecodeError(f"unknown handshake type {msg_type}")
    reader.expect_end()
    return msg


def read_handshake(data: bytes, offset: int = 0) -> Tuple[HandshakeMessage, int]:
    """Decode the handshake message at ``offset``; return it and its encoded size."""
    if len(data) - offset < HANDSHAKE_HEADER_LEN:
        raise DecodeError("truncated handshake header")
    msg_type = data[offset]
    length = int.from_bytes(data[offset + 1 : offset + 4], "big")
    start = offset + HANDSHAKE_HEADER_LEN
    if start + length > len(data):
        raise DecodeError(f"handshake body length {length} exceeds the {len(data) - start} bytes present")
    return _decode_body(msg_type, bytes(data[start : start + length])), HANDSHAKE_HEADER_LEN + length


def decode_handshake(data: bytes) -> HandshakeMessage:
    msg, used = read_handshake(data)
    if used != len(data):
        raise DecodeError(f"{len(data) - used} bytes after handshake message")
    return msg


def split_handshake(data: bytes) -> List[Tuple[HandshakeMessage, bytes]]:
    """Decode a run of handshake messages, pairing each with its raw encoding."""
    messages = []
    offset = 0
    while offset < len(data):
        msg, used = read_handshake(data, offset)
        messages.append((msg, bytes(data[offset : offset + used])))
        offset += used
    return messages
