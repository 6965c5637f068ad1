"""QUIC v1 wire codec for the subset the probes touch.

Variable-length integers, long-header packets (Initial, 0-RTT, Handshake,
Retry), Version Negotiation, and the frames that may appear in the Initial
and Handshake packet-number spaces.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

VARINT_MAX = (1 << 62) - 1
MAX_CID_LENGTH = 20
MIN_INITIAL_DATAGRAM = 1200
QUIC_V1 = 0x00000001
DEFAULT_RESERVED_VERSION = 0x1A2A3A4A

FRAME_PADDING = 0x00
FRAME_PING = 0x01
FRAME_ACK = 0x02
FRAME_ACK_ECN = 0x03
FRAME_CRYPTO = 0x06
FRAME_CONNECTION_CLOSE = 0x1C
FRAME_CONNECTION_CLOSE_APP = 0x1D


class WireError(ValueError):
    """Malformed or truncated wire data. ``offset`` is where parsing stopped."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class PacketType(enum.Enum):
    INITIAL = 0
    ZERO_RTT = 1
    HANDSHAKE = 2
    RETRY = 3
    VERSION_NEGOTIATION = 4


def is_reserved_version(version: int) -> bool:
    """True for greasing versions of the form 0x?a?a?a?a."""
    return version & 0x0F0F0F0F == 0x0A0A0A0A


# -- varints ---------------------------------------------------------------

def varint_size(value: int) -> int:
    if value < 0 or value > VARINT_MAX:
        raise WireError(f"varint value out of range: {value}")
    if value <= 0x3F:
        return 1
    if value <= 0x3FFF:
        return 2
    if value <= 0x3FFFFFFF:
        return 4
    return 8


def encode_varint(value: int, size: int | None = None) -> bytes:
    """Encode ``value`` using the shortest form, or exactly ``size`` bytes."""
    shortest = varint_size(value)
    if size is None:
        size = shortest
    elif size not in (1, 2, 4, 8) or size < shortest:
        raise WireError(f"cannot encode {value} in {size} bytes")
    prefix = {1: 0, 2: 1, 4: 2, 8: 3}[size]
    raw = value.to_bytes(size, "big")
    return bytes([raw[0] | (prefix << 6)]) + raw[1:]


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, consumed)`` for the varint starting at ``offset``."""
    if offset >= len(data):
        raise WireError("truncated varint", offset)
    first = data[offset]
    size = 1 << (first >> 6)
    if offset + size > len(data):
        raise WireError(f"truncated varint: need {size} bytes", offset)
    value = first & 0x3F
    for b in data[offset + 1 : offset + size]:
        value = (value << 8) | b
    return value, size


class Reader:
    """Cursor over a byte buffer; every failure carries the absolute offset."""

    def __init__(self, data: bytes, offset: int = 0, end: int | None = None):
        self.data = data
        self.pos = offset
        self.end = len(data) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def eof(self) -> bool:
        return self.pos >= self.end

    def bytes(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise WireError(f"truncated: need {n} bytes, have {self.remaining()}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return bytes(out)

    def rest(self) -> bytes:
        return self.bytes(self.remaining())

    def uint8(self) -> int:
        return self.bytes(1)[0]

    def uint16(self) -> int:
        return struct.unpack("!H", self.bytes(2))[0]

    def uint24(self) -> int:
        return int.from_bytes(self.bytes(3), "big")

    def uint32(self) -> int:
        return struct.unpack("!I", self.bytes(4))[0]

    def varint(self) -> int:
        if self.pos >= self.end:
            raise WireError("truncated varint", self.pos)
        size = 1 << (self.data[self.pos] >> 6)
        if self.pos + size > self.end:
            raise WireError(f"truncated varint: need {size} bytes", self.pos)
        value, used = decode_varint(self.data, self.pos)
        self.pos += used
        return value

    def vector(self, length_bytes: int) -> bytes:
        n = int.from_bytes(self.bytes(length_bytes), "big")
        return self.bytes(n)


# -- frames ------------------------------------------------------------------

@dataclass(frozen=True)
class Padding:
    length: int = 1


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Ack:
    """Acknowledged packet-number ranges, highest first, as inclusive (low, high)."""

    ranges: tuple[tuple[int, int], ...]
    delay: int = 0

    @property
    def largest(self) -> int:
        return self.ranges[0][1]


@dataclass(frozen=True)
class Crypto:
    offset: int
    data: bytes


@dataclass(frozen=True)
class ConnectionClose:
    code: int
    frame_type: int | None
    reason: str
    is_application: bool = False
    raw_reason: bytes = b""
    reason_replaced: bool = False

    @classmethod
    def make(cls, code: int, reason: str = "", frame_type: int | None = 0,
             is_application: bool = False) -> "ConnectionClose":
        raw = reason.encode("utf-8")
        return cls(code, None if is_application else frame_type, reason,
                   is_application, raw, False)


@dataclass(frozen=True)
class Opaque:
    """Frame type this codec does not model; ``data`` is everything after the type."""

    frame_type: int
    data: bytes


Frame = Union[Padding, Ping, Ack, Crypto, ConnectionClose, Opaque]


def _parse_ack(r: Reader, ecn: bool) -> Ack:
    largest = r.varint()
    delay = r.varint()
    count = r.varint()
    first = r.varint()
    if first > largest:
        raise WireError("ACK first range exceeds largest acknowledged", r.pos)
    high = largest
    low = largest - first
    ranges = [(low, high)]
    for _ in range(count):
        gap = r.varint()
        length = r.varint()
        high = low - gap - 2
        low = high - length
        if low < 0:
            raise WireError("ACK range below zero", r.pos)
        ranges.append((low, high))
    if ecn:
        for _ in range(3):
            r.varint()
    return Ack(tuple(ranges), delay)


def parse_frames(plaintext: bytes) -> list[Frame]:
    """Decode a decrypted packet payload into frames, in wire order.

    Unknown frame types end parsing with an :class:`Opaque` record holding the
    remaining bytes, because their length is not knowable.
    """
    r = Reader(plaintext)
    frames: list[Frame] = []
    while not r.eof():
        start = r.pos
        ftype = r.varint()
        if ftype == FRAME_PADDING:
            n = 1
            while not r.eof() and r.data[r.pos] == 0:
                r.pos += 1
                n += 1
            frames.append(Padding(n))
        elif ftype == FRAME_PING:
            frames.append(Ping())
        elif ftype in (FRAME_ACK, FRAME_ACK_ECN):
            frames.append(_parse_ack(r, ftype == FRAME_ACK_ECN))
        elif ftype == FRAME_CRYPTO:
            offset = r.varint()
            length = r.varint()
            if offset + length > VARINT_MAX:
                raise WireError("CRYPTO frame exceeds varint range", start)
            frames.append(Crypto(offset, r.bytes(length)))
        elif ftype in (FRAME_CONNECTION_CLOSE, FRAME_CONNECTION_CLOSE_APP):
            code = r.varint()
            is_app = ftype == FRAME_CONNECTION_CLOSE_APP
            frame_type = None if is_app else r.varint()
            raw = r.bytes(r.varint())
            try:
                reason, replaced = raw.decode("utf-8"), False
            except UnicodeDecodeError:
                reason, replaced = raw.decode("utf-8", errors="replace"), True
            frames.append(ConnectionClose(code, frame_type, reason, is_app, raw, replaced))
        else:
            frames.append(Opaque(ftype, r.rest()))
    return frames


def encode_frame(frame: Frame) -> bytes:
    if isinstance(frame, Padding):
        return bytes(frame.length)
    if isinstance(frame, Ping):
        return b"\x01"
    if isinstance(frame, Ack):
        ranges = frame.ranges
        low, high = ranges[0]
        out = [encode_varint(FRAME_ACK), encode_varint(high), encode_varint(frame.delay),
               encode_varint(len(ranges) - 1), encode_varint(high - low)]
        prev_low = low
        for lo, hi in ranges[1:]:
            out.append(encode_varint(prev_low - hi - 2))
            out.append(encode_varint(hi - lo))
            prev_low = lo
        return b"".join(out)
    if isinstance(frame, Crypto):
        return (encode_varint(FRAME_CRYPTO) + encode_varint(frame.offset)
                + encode_varint(len(frame.data)) + frame.data)
    if isinstance(frame, ConnectionClose):
        raw = frame.raw_reason or frame.reason.encode("utf-8")
        if frame.is_application:
            head = encode_varint(FRAME_CONNECTION_CLOSE_APP) + encode_varint(frame.code)
        else:
            head = (encode_varint(FRAME_CONNECTION_CLOSE) + encode_varint(frame.code)
                    + encode_varint(frame.frame_type or 0))
        return head + encode_varint(len(raw)) + raw
    if isinstance(frame, Opaque):
        return encode_varint(frame.frame_type) + frame.data
    raise TypeError(f"not a frame: {frame!r}")


def encode_frames(frames: Sequence[Frame]) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


def ack_for(packet_numbers: Sequence[int], delay: int = 0) -> Ack:
    """Build an ACK frame covering exactly ``packet_numbers``."""
    pns = sorted(set(packet_numbers), reverse=True)
    if not pns:
        raise ValueError("nothing to acknowledge")
    ranges = []
    high = low = pns[0]
    for pn in pns[1:]:
        if pn == low - 1:
            low = pn
        else:
            ranges.append((low, high))
            high = low = pn
    ranges.append((low, high))
    return Ack(tuple(ranges), delay)


# -- long headers -------------------------------------------------------------

@dataclass
class LongHeader:
    packet_type: PacketType
    version: int
    dcid: bytes
    scid: bytes
    token: bytes = b""
    length: int | None = None
    # offsets relative to the start of the packet
    pn_offset: int | None = None
    packet_size: int = 0
    first_byte: int = 0
    packet_number: int | None = None
    # Retry only
    integrity_tag: bytes = b""


_TYPE_BITS = {PacketType.INITIAL: 0, PacketType.ZERO_RTT: 1,
              PacketType.HANDSHAKE: 2, PacketType.RETRY: 3}
_BITS_TYPE = {v: k for k, v in _TYPE_BITS.items()}


def _read_cid(r: Reader) -> bytes:
    at = r.pos
    n = r.uint8()
    if n > MAX_CID_LENGTH:
        raise WireError(f"connection ID length {n} exceeds {MAX_CID_LENGTH}", at)
    return r.bytes(n)


def parse_long_header(datagram: bytes, offset: int = 0) -> tuple[LongHeader, int]:
    """Parse the long header at ``offset``.

    Returns the header and the absolute offset of the (still protected)
    packet-number field, or of the version list / Retry token for those types.
    ``header.packet_size`` spans the whole packet so coalesced packets can be
    walked with :func:`iter_packets`.
    """
    r = Reader(datagram, offset)
    first = r.uint8()
    if not first & 0x80:
        raise WireError("not a long header packet", offset)
    version = r.uint32()
    dcid = _read_cid(r)
    scid = _read_cid(r)
    if version == 0:
        hdr = LongHeader(PacketType.VERSION_NEGOTIATION, 0, dcid, scid,
                         packet_size=len(datagram) - offset, first_byte=first)
        return hdr, r.pos
    ptype = _BITS_TYPE[(first >> 4) & 0x03]
    hdr = LongHeader(ptype, version, dcid, scid, first_byte=first)
    if ptype is PacketType.RETRY:
        if r.remaining() < 16:
            raise WireError("Retry packet shorter than its integrity tag", r.pos)
        body_start = r.pos
        hdr.token = r.bytes(r.remaining() - 16)
        hdr.integrity_tag = r.bytes(16)
        hdr.packet_size = len(datagram) - offset
        return hdr, body_start
    if ptype is PacketType.INITIAL:
        hdr.token = r.bytes(r.varint())
    length_at = r.pos
    hdr.length = r.varint()
    pn_at = r.pos
    if pn_at + hdr.length > len(datagram):
        raise WireError(f"packet length {hdr.length} overruns datagram", length_at)
    hdr.pn_offset = pn_at - offset
    hdr.packet_size = hdr.pn_offset + hdr.length
    return hdr, pn_at


def iter_packets(datagram: bytes) -> Iterator[tuple[LongHeader, int, int]]:
    """Yield ``(header, start, end)`` for each coalesced long-header packet.

    Iteration stops at the first byte that does not begin a long header
    (short-header packets and trailing padding are outside this codec).
    """
    pos = 0
    while pos < len(datagram):
        if not datagram[pos] & 0x80:
            return
        hdr, _ = parse_long_header(datagram, pos)
        end = pos + hdr.packet_size
        yield hdr, pos, end
        pos = end


def build_long_header(packet_type: PacketType, version: int, dcid: bytes, scid: bytes,
                      *, token: bytes = b"", payload_length: int, pn_length: int = 4,
                      tag_length: int = 16) -> bytes:
    """Serialize a long header up to (excluding) the packet-number field.

    The length field is always written as a 2-byte varint so the header size
    does not depend on the payload size.
    """
    if len(dcid) > MAX_CID_LENGTH or len(scid) > MAX_CID_LENGTH:
        raise WireError("connection ID longer than 20 bytes")
    if packet_type not in _TYPE_BITS or packet_type is PacketType.RETRY:
        raise ValueError(f"cannot build a protected {packet_type.name} header")
    first = 0xC0 | (_TYPE_BITS[packet_type] << 4) | (pn_length - 1)
    out = bytearray([first])
    out += struct.pack("!I", version)
    out += bytes([len(dcid)]) + dcid + bytes([len(scid)]) + scid
    if packet_type is PacketType.INITIAL:
        out += encode_varint(len(token)) + token
    out += encode_varint(pn_length + payload_length + tag_length, 2)
    return bytes(out)


# -- version negotiation -------------------------------------------------------

@dataclass(frozen=True)
class VersionNegotiation:
    dcid: bytes
    scid: bytes
    versions: tuple[int, ...] = field(default_factory=tuple)


def parse_version_negotiation(datagram: bytes) -> VersionNegotiation:
    hdr, pos = parse_long_header(datagram)
    if hdr.packet_type is not PacketType.VERSION_NEGOTIATION:
        raise WireError(f"version field is {hdr.version:#010x}, not 0", 1)
    body = datagram[pos:]
    if len(body) % 4:
        raise WireError("trailing partial version in version list", pos + len(body) - len(body) % 4)
    if not body:
        raise WireError("empty version list", pos)
    versions = struct.unpack(f"!{len(body) // 4}I", body)
    return VersionNegotiation(hdr.dcid, hdr.scid, tuple(versions))


def build_version_negotiation(dcid: bytes, scid: bytes, versions: Sequence[int],
                              unused_bits: int | None = None) -> bytes:
    if unused_bits is None:
        unused_bits = os.urandom(1)[0] & 0x7F
    out = bytearray([0x80 | (unused_bits & 0x7F)])
    out += b"\x00\x00\x00\x00"
    out += bytes([len(dcid)]) + dcid + bytes([len(scid)]) + scid
    for v in versions:
        out += struct.pack("!I", v)
    return bytes(out)


def build_retry(version: int, dcid: bytes, scid: bytes, token: bytes, tag: bytes) -> bytes:
    """Assemble a Retry packet; ``tag`` is the precomputed integrity tag."""
    first = 0xF0 | (os.urandom(1)[0] & 0x0F)
    out = bytearray([first]) + struct.pack("!I", version)
    out += bytes([len(dcid)]) + dcid + bytes([len(scid)]) + scid
    return bytes(out + token + tag)


def pad_to_datagram(header_len: int, pn_length: int, payload: bytes, size: int,
                    tag_length: int = 16) -> bytes:
    """Append PADDING so header + pn + payload + tag reaches ``size`` bytes."""
    missing = size - (header_len + pn_length + len(payload) + tag_length)
    if missing > 0:
        payload += bytes(missing)
    return payload


def build_vn_trigger_datagram(dcid: bytes, scid: bytes,
                              version: int = DEFAULT_RESERVED_VERSION,
                              crypto_payload: bytes | None = None) -> bytes:
    """A complete, padded, protected Initial that carries an unsupported version.

    ``crypto_payload`` is the ClientHello to embed; by default a fresh one
    (ALPN ``h3``) is built. The packet is protected with the v1 Initial keys
    for ``dcid`` so stacks that parse the whole packet before checking the
    version still see a well-formed Initial.
    """
    from . import pktcrypto, tlsmini

    if not is_reserved_version(version):
        raise ValueError(f"{version:#010x} is not a reserved version (0x?a?a?a?a)")
    if crypto_payload is None:
        cfg = tlsmini.ClientHelloConfig(alpn=["h3"], scid=scid)
        crypto_payload, _ = tlsmini.build_client_hello(cfg)
    keys = pktcrypto.initial_keys_for_salt(dcid, pktcrypto.INITIAL_SALT_V1)
    payload = encode_frame(Crypto(0, crypto_payload))
    probe = build_long_header(PacketType.INITIAL, version, dcid, scid, payload_length=0)
    payload = pad_to_datagram(len(probe), 4, payload, MIN_INITIAL_DATAGRAM)
    header = build_long_header(PacketType.INITIAL, version, dcid, scid,
                               payload_length=len(payload))
    return pktcrypto.protect_packet(keys.client, header, payload, packet_number=0, pn_length=4)
