"""Just enough TLS 1.3 for QUIC probing.

Builds the probe ClientHello and dissects ServerHello / EncryptedExtensions,
keeping extension and transport-parameter order exactly as seen on the wire.
The server-side builders are used by the lab harness.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .pktcrypto import (
    TLS_AES_128_GCM_SHA256,
    TLS_CHACHA20_POLY1305_SHA256,
    KeyExchange,
    TranscriptState,
)
from .wire import Crypto, Reader, WireError, encode_varint

HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2
HS_ENCRYPTED_EXTENSIONS = 8

EXT_SERVER_NAME = 0
EXT_SUPPORTED_GROUPS = 10
EXT_SIGNATURE_ALGORITHMS = 13
EXT_ALPN = 16
EXT_SUPPORTED_VERSIONS = 43
EXT_PSK_MODES = 45
EXT_KEY_SHARE = 51
EXT_QUIC_TRANSPORT_PARAMETERS = 0x39

GROUP_X25519 = 0x001D
TLS13 = 0x0304

HRR_RANDOM = bytes.fromhex(
    "cf21ad74e59a6111be1d8c021e65b891c2a211167abb8c5e079e09e2c8a8339c")

SIGNATURE_ALGORITHMS = (0x0403, 0x0804, 0x0401, 0x0503, 0x0805, 0x0501, 0x0806, 0x0601)

# transport parameter ids
TP_ORIGINAL_DCID = 0x00
TP_MAX_IDLE_TIMEOUT = 0x01
TP_STATELESS_RESET_TOKEN = 0x02
TP_MAX_UDP_PAYLOAD_SIZE = 0x03
TP_INITIAL_MAX_DATA = 0x04
TP_MAX_STREAM_DATA_BIDI_LOCAL = 0x05
TP_MAX_STREAM_DATA_BIDI_REMOTE = 0x06
TP_MAX_STREAM_DATA_UNI = 0x07
TP_MAX_STREAMS_BIDI = 0x08
TP_MAX_STREAMS_UNI = 0x09
TP_ACK_DELAY_EXPONENT = 0x0A
TP_MAX_ACK_DELAY = 0x0B
TP_INITIAL_SCID = 0x0F
TP_RETRY_SCID = 0x10

EXT_SIG_SV_FIRST = "43-51"
EXT_SIG_KS_FIRST = "51-43"


class TlsError(ValueError):
    pass


class IncompleteMessage(TlsError):
    """The buffer does not yet hold the whole handshake message."""


def _vec(data: bytes, length_bytes: int) -> bytes:
    return len(data).to_bytes(length_bytes, "big") + data


def _ext(ext_type: int, body: bytes) -> bytes:
    return struct.pack("!HH", ext_type, len(body)) + body


def handshake_message(msg_type: int, body: bytes) -> bytes:
    return bytes([msg_type]) + len(body).to_bytes(3, "big") + body


def split_handshake(stream: bytes, offset: int = 0) -> tuple[int, bytes, int]:
    """Return (type, full message incl. header, next offset) for the message at ``offset``."""
    if len(stream) - offset < 4:
        raise IncompleteMessage("handshake header incomplete")
    msg_type = stream[offset]
    length = int.from_bytes(stream[offset + 1 : offset + 4], "big")
    end = offset + 4 + length
    if end > len(stream):
        raise IncompleteMessage(f"handshake message needs {length} bytes")
    return msg_type, stream[offset:end], end


# -- transport parameters ---------------------------------------------------------

def encode_transport_parameters(params: Iterable[tuple[int, bytes]]) -> bytes:
    return b"".join(encode_varint(pid) + encode_varint(len(v)) + v for pid, v in params)


def decode_transport_parameters(data: bytes) -> list[tuple[int, bytes]]:
    r = Reader(data)
    out = []
    while not r.eof():
        pid = r.varint()
        out.append((pid, r.bytes(r.varint())))
    return out


def default_client_transport_parameters(scid: bytes) -> list[tuple[int, bytes]]:
    return [
        (TP_INITIAL_MAX_DATA, encode_varint(1 << 20)),
        (TP_MAX_STREAM_DATA_BIDI_REMOTE, encode_varint(1 << 18)),
        (TP_MAX_STREAM_DATA_UNI, encode_varint(1 << 18)),
        (TP_MAX_STREAMS_BIDI, encode_varint(100)),
        (TP_MAX_STREAMS_UNI, encode_varint(100)),
        (TP_INITIAL_SCID, scid),
    ]


# -- ClientHello ----------------------------------------------------------------

@dataclass
class ClientHelloConfig:
    alpn: Sequence[str] = ("h3",)
    sni: str | None = None
    scid: bytes = b""
    transport_params: Sequence[tuple[int, bytes]] | None = None
    key_exchange: KeyExchange | None = None
    ciphers: Sequence[int] = (TLS_AES_128_GCM_SHA256, TLS_CHACHA20_POLY1305_SHA256)
    random: bytes | None = None

    def __post_init__(self):
        if not self.alpn:
            raise TlsError("ALPN list must not be empty")
        for proto in self.alpn:
            n = len(proto.encode())
            if not 1 <= n <= 255:
                raise TlsError(f"ALPN entry {proto!r} is {n} bytes; must be 1..255")
        if self.key_exchange is None:
            self.key_exchange = KeyExchange.generate()
        if self.transport_params is None:
            self.transport_params = default_client_transport_parameters(self.scid)


def build_client_hello(cfg: ClientHelloConfig) -> tuple[bytes, TranscriptState]:
    """Serialize the ClientHello handshake message and start the transcript.

    Output is a pure function of ``cfg``: with ``random`` unset, the random
    field is derived from the key share so repeat builds are byte-identical.
    """
    kx = cfg.key_exchange
    random = cfg.random
    if random is None:
        random = hashlib.sha256(b"quicfp client random" + kx.private).digest()
    exts = []
    if cfg.sni:
        name = cfg.sni.encode("idna")
        exts.append(_ext(EXT_SERVER_NAME, _vec(b"\x00" + _vec(name, 2), 2)))
    exts.append(_ext(EXT_SUPPORTED_GROUPS, _vec(struct.pack("!H", GROUP_X25519), 2)))
    exts.append(_ext(EXT_SIGNATURE_ALGORITHMS,
                     _vec(b"".join(struct.pack("!H", s) for s in SIGNATURE_ALGORITHMS), 2)))
    alpn = b"".join(_vec(p.encode(), 1) for p in cfg.alpn)
    exts.append(_ext(EXT_ALPN, _vec(alpn, 2)))
    exts.append(_ext(EXT_SUPPORTED_VERSIONS, _vec(struct.pack("!H", TLS13), 1)))
    exts.append(_ext(EXT_PSK_MODES, _vec(b"\x01", 1)))
    share = struct.pack("!H", GROUP_X25519) + _vec(kx.public, 2)
    exts.append(_ext(EXT_KEY_SHARE, _vec(share, 2)))
    exts.append(_ext(EXT_QUIC_TRANSPORT_PARAMETERS,
                     encode_transport_parameters(cfg.transport_params)))
    body = (struct.pack("!H", 0x0303) + random + _vec(b"", 1)
            + _vec(b"".join(struct.pack("!H", c) for c in cfg.ciphers), 2)
            + _vec(b"\x00", 1) + _vec(b"".join(exts), 2))
    msg = handshake_message(HS_CLIENT_HELLO, body)
    transcript = TranscriptState()
    transcript.add(msg)
    return msg, transcript


def _parse_extensions(r: Reader) -> list[tuple[int, bytes]]:
    block = r.vector(2)
    er = Reader(block)
    out = []
    while not er.eof():
        ext_type = er.uint16()
        out.append((ext_type, er.vector(2)))
    return out


@dataclass
class ClientHelloInfo:
    """Server-side view of a ClientHello (used by the lab harness)."""

    random: bytes
    session_id: bytes
    ciphers: list[int]
    extensions: list[tuple[int, bytes]]
    alpn: list[str] = field(default_factory=list)
    sni: str | None = None
    x25519_public: bytes | None = None
    transport_params: list[tuple[int, bytes]] = field(default_factory=list)


def parse_client_hello(msg: bytes) -> ClientHelloInfo:
    msg_type, msg, _ = split_handshake(msg)
    if msg_type != HS_CLIENT_HELLO:
        raise TlsError(f"expected ClientHello, got handshake type {msg_type}")
    r = Reader(msg, 4)
    r.uint16()
    random = r.bytes(32)
    session_id = r.vector(1)
    cs = r.vector(2)
    ciphers = [int.from_bytes(cs[i : i + 2], "big") for i in range(0, len(cs), 2)]
    r.vector(1)
    exts = _parse_extensions(r)
    info = ClientHelloInfo(random, session_id, ciphers, exts)
    for ext_type, data in exts:
        er = Reader(data)
        if ext_type == EXT_ALPN:
            lr = Reader(er.vector(2))
            while not lr.eof():
                info.alpn.append(lr.vector(1).decode("utf-8", errors="replace"))
        elif ext_type == EXT_SERVER_NAME:
            lr = Reader(er.vector(2))
            while not lr.eof():
                kind = lr.uint8()
                name = lr.vector(2)
                if kind == 0:
                    info.sni = name.decode("ascii", errors="replace")
        elif ext_type == EXT_KEY_SHARE:
            lr = Reader(er.vector(2))
            while not lr.eof():
                group = lr.uint16()
                key = lr.vector(2)
                if group == GROUP_X25519:
                    info.x25519_public = key
        elif ext_type == EXT_QUIC_TRANSPORT_PARAMETERS:
            info.transport_params = decode_transport_parameters(data)
    return info


# -- ServerHello ------------------------------------------------------------------

@dataclass
class ServerHelloSummary:
    cipher: int
    ext_order: list[int]
    server_key_share: bytes | None
    legacy_session_echo: bytes
    random: bytes = b""
    is_hrr: bool = False
    selected_group: int | None = None

    @property
    def ext_signature(self) -> str:
        return ext_order_signature(self.ext_order)


def ext_order_signature(ext_order: Sequence[int]) -> str:
    """Relative order of supported_versions (43) and key_share (51)."""
    if ext_order.count(EXT_SUPPORTED_VERSIONS) != 1 or ext_order.count(EXT_KEY_SHARE) != 1:
        raise TlsError("ServerHello must carry supported_versions and key_share exactly once")
    sv = ext_order.index(EXT_SUPPORTED_VERSIONS)
    ks = ext_order.index(EXT_KEY_SHARE)
    return EXT_SIG_SV_FIRST if sv < ks else EXT_SIG_KS_FIRST


def parse_server_hello(msg: bytes) -> ServerHelloSummary:
    msg_type, msg, _ = split_handshake(msg)
    if msg_type != HS_SERVER_HELLO:
        raise TlsError(f"expected ServerHello, got handshake type {msg_type}")
    r = Reader(msg, 4)
    try:
        r.uint16()
        random = r.bytes(32)
        session_echo = r.vector(1)
        cipher = r.uint16()
        r.uint8()
        exts = _parse_extensions(r)
    except WireError as exc:
        raise TlsError(f"truncated ServerHello: {exc}") from None
    order = [t for t, _ in exts]
    for needed, name in ((EXT_SUPPORTED_VERSIONS, "supported_versions"),
                         (EXT_KEY_SHARE, "key_share")):
        if needed not in order:
            raise TlsError(f"ServerHello lacks mandatory {name} extension")
    ext_order_signature(order)
    summary = ServerHelloSummary(cipher, order, None, session_echo, random,
                                 is_hrr=random == HRR_RANDOM)
    ks = dict(exts)[EXT_KEY_SHARE]
    kr = Reader(ks)
    group = kr.uint16()
    summary.selected_group = group
    if not summary.is_hrr:
        key = kr.vector(2)
        if group == GROUP_X25519:
            if len(key) != 32:
                raise TlsError("x25519 key share must be 32 bytes")
            summary.server_key_share = key
    return summary


def build_server_hello(*, random: bytes, session_echo: bytes, cipher: int, public: bytes,
                       ext_signature: str = EXT_SIG_SV_FIRST) -> bytes:
    sv = _ext(EXT_SUPPORTED_VERSIONS, struct.pack("!H", TLS13))
    ks = _ext(EXT_KEY_SHARE, struct.pack("!H", GROUP_X25519) + _vec(public, 2))
    exts = sv + ks if ext_signature == EXT_SIG_SV_FIRST else ks + sv
    body = (struct.pack("!H", 0x0303) + random + _vec(session_echo, 1)
            + struct.pack("!H", cipher) + b"\x00" + _vec(exts, 2))
    return handshake_message(HS_SERVER_HELLO, body)


# -- EncryptedExtensions ----------------------------------------------------------

@dataclass
class EncryptedExtensionsSummary:
    ext_order: list[int]
    tp_order: list[tuple[int, bytes]]
    alpn: str | None = None

    @property
    def tp_ids(self) -> list[int]:
        return [pid for pid, _ in self.tp_order]

    @property
    def duplicate_tp_ids(self) -> list[int]:
        seen, dups = set(), []
        for pid in self.tp_ids:
            if pid in seen and pid not in dups:
                dups.append(pid)
            seen.add(pid)
        return dups


def parse_encrypted_extensions(msg: bytes) -> EncryptedExtensionsSummary:
    msg_type, msg, _ = split_handshake(msg)
    if msg_type != HS_ENCRYPTED_EXTENSIONS:
        raise TlsError(f"expected EncryptedExtensions, got handshake type {msg_type}")
    r = Reader(msg, 4)
    try:
        exts = _parse_extensions(r)
    except WireError as exc:
        raise TlsError(f"truncated EncryptedExtensions: {exc}") from None
    order = [t for t, _ in exts]
    data = dict(exts)
    if EXT_QUIC_TRANSPORT_PARAMETERS not in data:
        raise TlsError("quic_transport_parameters extension absent")
    try:
        tps = decode_transport_parameters(data[EXT_QUIC_TRANSPORT_PARAMETERS])
    except WireError as exc:
        raise TlsError(f"truncated transport parameter: {exc}") from None
    alpn = None
    if EXT_ALPN in data:
        lr = Reader(Reader(data[EXT_ALPN]).vector(2))
        if not lr.eof():
            alpn = lr.vector(1).decode("utf-8", errors="replace")
    return EncryptedExtensionsSummary(order, tps, alpn)


def build_encrypted_extensions(*, transport_params: Sequence[tuple[int, bytes]],
                               alpn: str | None = "h3") -> bytes:
    exts = b""
    if alpn is not None:
        exts += _ext(EXT_ALPN, _vec(_vec(alpn.encode(), 1), 2))
    exts += _ext(EXT_QUIC_TRANSPORT_PARAMETERS, encode_transport_parameters(transport_params))
    return handshake_message(HS_ENCRYPTED_EXTENSIONS, _vec(exts, 2))


# -- CRYPTO stream reassembly ------------------------------------------------------

class CryptoConflict(TlsError):
    pass


@dataclass
class Reassembly:
    data: bytes
    complete: bool
    gaps: list[tuple[int, int]]


class CryptoBuffer:
    """Collects CRYPTO frames of one packet-number space, keyed by offset."""

    def __init__(self):
        self._bytes: dict[int, int] = {}

    def add(self, offset: int, data: bytes) -> None:
        for i, b in enumerate(data, offset):
            prev = self._bytes.get(i)
            if prev is not None and prev != b:
                raise CryptoConflict(f"overlapping CRYPTO data differs at offset {i}")
            self._bytes[i] = b

    def contiguous(self) -> bytes:
        out = bytearray()
        i = 0
        while i in self._bytes:
            out.append(self._bytes[i])
            i += 1
        return bytes(out)

    def gaps(self) -> list[tuple[int, int]]:
        if not self._bytes:
            return []
        gaps, pos = [], 0
        for off in sorted(self._bytes):
            if off > pos:
                gaps.append((pos, off))
            pos = off + 1
        return gaps


def reassemble_crypto(frames: Iterable[Crypto], space: str = "initial") -> Reassembly:
    """Order CRYPTO frames by offset; gaps leave the stream incomplete."""
    buf = CryptoBuffer()
    for f in frames:
        buf.add(f.offset, f.data)
    gaps = buf.gaps()
    return Reassembly(buf.contiguous(), not gaps, gaps)
