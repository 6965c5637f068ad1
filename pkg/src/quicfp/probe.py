"""Probe sessions against one target.

Three probe kinds: a stateless version-negotiation trigger, and stateful
handshakes offering either an ALPN the server will reject (``invalid``) or
``h3``. A handshake session sends a ClientHello, follows at most one Retry,
acknowledges the server flight for a bounded number of round trips, extracts
ServerHello/EncryptedExtensions or CONNECTION_CLOSE, then closes politely.

Everything the session learns goes through :class:`FlightExtractor`, which
also replays captured flights offline, so live and replayed observations
come out of the same code path.
"""
from __future__ import annotations

import enum
import ipaddress
import logging
import os
import socket
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Protocol, Sequence

from . import pktcrypto, tlsmini
from .capture import IN, OUT, Capture
from .pktcrypto import CryptoError, KeyExchange, Space
from .tlsmini import TlsError
from .wire import (
    DEFAULT_RESERVED_VERSION,
    MIN_INITIAL_DATAGRAM,
    QUIC_V1,
    Ack,
    ConnectionClose,
    Crypto,
    PacketType,
    Padding,
    Ping,
    WireError,
    ack_for,
    build_long_header,
    build_vn_trigger_datagram,
    encode_frames,
    iter_packets,
    parse_frames,
    parse_version_negotiation,
)

log = logging.getLogger(__name__)

ALPN_INVALID = "invalid"
ALPN_H3 = "h3"
CLIENT_CID_LENGTH = 8


class Outcome(str, enum.Enum):
    VERSION_NEGOTIATION = "version_negotiation"
    CLOSED = "closed"
    HANDSHAKE_PROGRESSED = "handshake_progressed"
    TIMEOUT = "timeout"
    UNPARSEABLE = "unparseable"


class ProbeError(OSError):
    """Sending failed at the socket layer."""


@dataclass(frozen=True)
class Target:
    address: str
    port: int = 443
    sni: str | None = None

    def __post_init__(self):
        ipaddress.ip_address(self.address)
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside 1..65535")

    @property
    def endpoint(self) -> str:
        host = f"[{self.address}]" if ":" in self.address else self.address
        return f"{host}:{self.port}"

    def to_dict(self) -> dict:
        return {"address": self.address, "port": self.port, "sni": self.sni}

    @classmethod
    def from_dict(cls, d: dict) -> "Target":
        return cls(d["address"], int(d.get("port", 443)), d.get("sni"))


@dataclass
class ProbeConfig:
    response_timeout: float = 3.0
    max_round_trips: int = 2
    retries: int = 1
    reserved_version: int = DEFAULT_RESERVED_VERSION
    client_transport_params: Sequence[tuple[int, bytes]] | None = None

    def __post_init__(self):
        if self.response_timeout <= 0:
            raise ValueError("response_timeout must be positive")
        if self.max_round_trips < 0 or self.retries < 0:
            raise ValueError("max_round_trips and retries must be >= 0")


@dataclass(frozen=True)
class ErrorObservation:
    code: int
    frame_type: int | None
    reason: str
    space: str = Space.INITIAL.value
    is_application: bool = False
    reason_replaced: bool = False

    @classmethod
    def from_frame(cls, frame: ConnectionClose, space: Space) -> "ErrorObservation":
        return cls(frame.code, frame.frame_type, frame.reason, space.value,
                   frame.is_application, frame.reason_replaced)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorObservation":
        return cls(**d)


@dataclass
class HandshakeObservation:
    outcome: Outcome
    alpn: list[str] = field(default_factory=list)
    sni: str | None = None
    ext_signature: str | None = None
    tp_order: list[int] | None = None
    tp_duplicates: list[int] = field(default_factory=list)
    error: ErrorObservation | None = None
    aux_errors: list[ErrorObservation] = field(default_factory=list)
    alpn_missing_in_ee: bool = False
    negotiated_alpn: str | None = None
    retry_seen: bool = False
    notes: list[str] = field(default_factory=list)
    raw_flight: Capture | None = field(default=None, repr=False)

    @property
    def tp_set(self) -> frozenset[int] | None:
        return None if self.tp_order is None else frozenset(self.tp_order)

    def errors(self) -> list[ErrorObservation]:
        return ([self.error] if self.error else []) + list(self.aux_errors)

    def summary(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "alpn": list(self.alpn),
            "sni": self.sni,
            "ext_signature": self.ext_signature,
            "tp_order": self.tp_order,
            "tp_duplicates": self.tp_duplicates,
            "error": self.error.to_dict() if self.error else None,
            "aux_errors": [e.to_dict() for e in self.aux_errors],
            "alpn_missing_in_ee": self.alpn_missing_in_ee,
            "negotiated_alpn": self.negotiated_alpn,
            "retry_seen": self.retry_seen,
            "notes": list(self.notes),
        }

    @classmethod
    def from_summary(cls, d: dict) -> "HandshakeObservation":
        return cls(
            outcome=Outcome(d["outcome"]),
            alpn=list(d.get("alpn", [])),
            sni=d.get("sni"),
            ext_signature=d.get("ext_signature"),
            tp_order=d.get("tp_order"),
            tp_duplicates=list(d.get("tp_duplicates", [])),
            error=ErrorObservation.from_dict(d["error"]) if d.get("error") else None,
            aux_errors=[ErrorObservation.from_dict(e) for e in d.get("aux_errors", [])],
            alpn_missing_in_ee=d.get("alpn_missing_in_ee", False),
            negotiated_alpn=d.get("negotiated_alpn"),
            retry_seen=d.get("retry_seen", False),
            notes=list(d.get("notes", [])),
        )


@dataclass
class VersionNegotiationResult:
    outcome: Outcome
    versions: list[int] = field(default_factory=list)
    raw_flight: Capture | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {"outcome": self.outcome.value, "versions": self.versions}


# -- extraction --------------------------------------------------------------

class FlightExtractor:
    """Client-side state machine fed with server datagrams.

    Holds everything needed to decrypt the server's Initial and Handshake
    packets and nothing needed to send; the live session reads its fields to
    decide what to transmit next.
    """

    def __init__(self, original_dcid: bytes, client_hello: bytes, key_exchange: KeyExchange,
                 alpn: Sequence[str] = (), sni: str | None = None):
        self.original_dcid = original_dcid
        self.dcid = original_dcid
        self.client_hello = client_hello
        self.key_exchange = key_exchange
        self.alpn = list(alpn)
        self.sni = sni
        self.initial_keys = pktcrypto.derive_initial_keys(original_dcid)
        self.handshake_keys: pktcrypto.SpaceKeys | None = None
        self.crypto = {Space.INITIAL: tlsmini.CryptoBuffer(), Space.HANDSHAKE: tlsmini.CryptoBuffer()}
        self.largest = {Space.INITIAL: -1, Space.HANDSHAKE: -1}
        self.received = {Space.INITIAL: [], Space.HANDSHAKE: []}
        self.ack_pending = {Space.INITIAL: False, Space.HANDSHAKE: False}
        self.pending_handshake: list[bytes] = []
        self.server_hello: tlsmini.ServerHelloSummary | None = None
        self.encrypted_extensions: tlsmini.EncryptedExtensionsSummary | None = None
        self.closes: list[ErrorObservation] = []
        self.retry_token = b""
        self.retry_seen = False
        self.server_cid: bytes | None = None
        self.vn_versions: list[int] | None = None
        self.stopped = False
        self.notes: list[str] = []
        self.datagrams = 0
        self.useful = 0
        self.bad = 0

    @property
    def done(self) -> bool:
        return (self.stopped or self.vn_versions is not None or bool(self.closes)
                or self.encrypted_extensions is not None)

    def _note(self, msg: str) -> None:
        if msg not in self.notes:
            self.notes.append(msg)

    def feed(self, datagram: bytes) -> None:
        self.datagrams += 1
        try:
            packets = list(iter_packets(datagram))
        except WireError as exc:
            self.bad += 1
            self._note(f"malformed datagram: {exc}")
            return
        if not packets:
            self.bad += 1
            self._note("datagram without long-header packet")
            return
        for hdr, start, end in packets:
            try:
                self._packet(hdr, datagram[start:end])
            except (WireError, CryptoError, TlsError) as exc:
                self.bad += 1
                self._note(f"{hdr.packet_type.name.lower()} packet dropped: {exc}")

    def _packet(self, hdr, packet: bytes) -> None:
        if hdr.packet_type is PacketType.VERSION_NEGOTIATION:
            self.vn_versions = list(parse_version_negotiation(packet).versions)
            self.useful += 1
            return
        if hdr.version != QUIC_V1:
            raise WireError(f"unexpected version {hdr.version:#010x}")
        if hdr.packet_type is PacketType.RETRY:
            if self.retry_seen or self.received[Space.INITIAL]:
                self._note("extra retry ignored")
                return
            self.retry_seen = True
            self.retry_token = hdr.token
            self.dcid = hdr.scid
            self.initial_keys = pktcrypto.derive_initial_keys(hdr.scid)
            self.useful += 1
            return
        if hdr.packet_type is PacketType.INITIAL:
            self._open(Space.INITIAL, self.initial_keys.server, hdr, packet)
        elif hdr.packet_type is PacketType.HANDSHAKE:
            if self.handshake_keys is None:
                self.pending_handshake.append(packet)
                return
            self._open(Space.HANDSHAKE, self.handshake_keys.server, hdr, packet)
        else:
            self._note(f"ignored {hdr.packet_type.name} packet")

    def _open(self, space: Space, keys, hdr, packet: bytes) -> None:
        plaintext, pn = pktcrypto.unprotect_packet(keys, packet, hdr, self.largest[space])
        self.largest[space] = max(self.largest[space], pn)
        self.received[space].append(pn)
        if self.server_cid is None:
            self.server_cid = hdr.scid
        self.useful += 1
        for frame in parse_frames(plaintext):
            if isinstance(frame, Crypto):
                self.crypto[space].add(frame.offset, frame.data)
                self.ack_pending[space] = True
            elif isinstance(frame, ConnectionClose):
                self.closes.append(ErrorObservation.from_frame(frame, space))
            elif isinstance(frame, (Ping,)):
                self.ack_pending[space] = True
        self._advance()

    def _advance(self) -> None:
        if self.server_hello is None:
            stream = self.crypto[Space.INITIAL].contiguous()
            try:
                _, msg, _ = tlsmini.split_handshake(stream)
            except tlsmini.IncompleteMessage:
                return
            sh = tlsmini.parse_server_hello(msg)
            self.server_hello = sh
            if sh.is_hrr:
                self._note("hrr-unsupported")
                self.stopped = True
                return
            if sh.server_key_share is None:
                self._note("unsupported-group")
                self.stopped = True
                return
            shared = pktcrypto.x25519_shared(self.key_exchange, sh.server_key_share)
            transcript = pktcrypto.TranscriptState()
            transcript.add(self.client_hello)
            transcript.add(msg)
            self.handshake_keys = pktcrypto.derive_handshake_keys(shared, transcript, sh.cipher)
            queued, self.pending_handshake = self.pending_handshake, []
            for packet in queued:
                hdr = next(iter_packets(packet))[0]
                self._open(Space.HANDSHAKE, self.handshake_keys.server, hdr, packet)
        if self.handshake_keys is not None and self.encrypted_extensions is None:
            stream = self.crypto[Space.HANDSHAKE].contiguous()
            try:
                msg_type, msg, _ = tlsmini.split_handshake(stream)
            except tlsmini.IncompleteMessage:
                return
            if msg_type != tlsmini.HS_ENCRYPTED_EXTENSIONS:
                self._note(f"first handshake message is type {msg_type}")
                self.stopped = True
                return
            self.encrypted_extensions = tlsmini.parse_encrypted_extensions(msg)

    def observation(self, raw_flight: Capture | None = None) -> HandshakeObservation:
        if self.vn_versions is not None:
            outcome = Outcome.VERSION_NEGOTIATION
        elif self.encrypted_extensions is not None:
            outcome = Outcome.HANDSHAKE_PROGRESSED
        elif self.closes:
            outcome = Outcome.CLOSED
        elif self.bad and not self.useful or self.stopped:
            outcome = Outcome.UNPARSEABLE
        else:
            outcome = Outcome.TIMEOUT
        obs = HandshakeObservation(outcome, alpn=list(self.alpn), sni=self.sni,
                                   retry_seen=self.retry_seen, notes=list(self.notes),
                                   raw_flight=raw_flight)
        if self.server_hello is not None and not self.server_hello.is_hrr:
            obs.ext_signature = self.server_hello.ext_signature
        ee = self.encrypted_extensions
        if ee is not None:
            obs.tp_order = ee.tp_ids
            obs.tp_duplicates = ee.duplicate_tp_ids
            obs.negotiated_alpn = ee.alpn
            obs.alpn_missing_in_ee = ee.alpn is None
        if self.closes:
            obs.error = self.closes[0]
            obs.aux_errors = self.closes[1:]
        return obs


def extract_observation(capture: Capture) -> HandshakeObservation:
    """Rebuild the observation of a recorded handshake session offline."""
    meta = capture.meta
    if meta.get("probe") != "handshake":
        raise ValueError(f"capture holds a {meta.get('probe')!r} probe, not a handshake")
    ex = FlightExtractor(
        bytes.fromhex(meta["original_dcid"]),
        bytes.fromhex(meta["client_hello"]),
        KeyExchange.from_private(bytes.fromhex(meta["client_private"])),
        alpn=meta.get("alpn", []),
        sni=meta.get("target", {}).get("sni"),
    )
    for data in capture.inbound():
        if ex.done:
            break
        ex.feed(data)
    return ex.observation(capture)


def extract_version_negotiation(capture: Capture) -> VersionNegotiationResult:
    for data in capture.inbound():
        try:
            vn = parse_version_negotiation(data)
        except WireError:
            return VersionNegotiationResult(Outcome.UNPARSEABLE, [], capture)
        return VersionNegotiationResult(Outcome.VERSION_NEGOTIATION, list(vn.versions), capture)
    return VersionNegotiationResult(Outcome.TIMEOUT, [], capture)


def replay(capture: Capture) -> HandshakeObservation | VersionNegotiationResult:
    if capture.meta.get("probe") == "vn":
        return extract_version_negotiation(capture)
    return extract_observation(capture)


# -- transports ------------------------------------------------------------------

class Transport(Protocol):
    def send(self, data: bytes) -> None: ...
    def recv(self, timeout: float) -> bytes | None: ...
    def close(self) -> None: ...


TransportFactory = Callable[[Target], Transport]


class UdpTransport:
    """Connected UDP socket; an optional limiter gates every send."""

    def __init__(self, target: Target, limiter=None):
        family = socket.AF_INET6 if ":" in target.address else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        self.sock.connect((target.address, target.port))
        self.limiter = limiter

    def send(self, data: bytes) -> None:
        if self.limiter is not None:
            self.limiter.acquire()
        try:
            self.sock.send(data)
        except ConnectionRefusedError:
            pass  # ICMP from an earlier datagram; the port is closed
        except OSError as exc:
            raise ProbeError(f"send failed: {exc}") from exc

    def recv(self, timeout: float) -> bytes | None:
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            self.sock.settimeout(left)
            try:
                return self.sock.recv(65535)
            except socket.timeout:
                return None
            except ConnectionRefusedError:
                # closed port: keep waiting out the timeout so pacing stays uniform
                time.sleep(min(left, 0.05))

    def close(self) -> None:
        self.sock.close()


def udp_transport_factory(limiter=None) -> TransportFactory:
    return lambda target: UdpTransport(target, limiter)


# -- sessions --------------------------------------------------------------------

def _capture_meta(kind: str, target: Target, **extra) -> dict:
    return {"format": 1, "probe": kind, "target": target.to_dict(), "started": time.time(), **extra}


class HandshakeSession:
    """One stateful probe; owns its transport and all per-connection state."""

    def __init__(self, target: Target, alpn: Sequence[str], cfg: ProbeConfig,
                 transport: Transport):
        self.target = target
        self.cfg = cfg
        self.transport = transport
        self.scid = os.urandom(CLIENT_CID_LENGTH)
        original_dcid = os.urandom(CLIENT_CID_LENGTH)
        kx = KeyExchange.generate()
        ch_cfg = tlsmini.ClientHelloConfig(alpn=list(alpn), sni=target.sni, scid=self.scid,
                                           key_exchange=kx,
                                           transport_params=cfg.client_transport_params)
        self.client_hello, _ = tlsmini.build_client_hello(ch_cfg)
        self.extractor = FlightExtractor(original_dcid, self.client_hello, kx, alpn, target.sni)
        self.capture = Capture(_capture_meta(
            "handshake", target, alpn=list(alpn), original_dcid=original_dcid.hex(),
            client_private=kx.private.hex(), client_hello=self.client_hello.hex()))
        self.pn = {Space.INITIAL: 0, Space.HANDSHAKE: 0}
        self.sent_first = 0
        self.sent_retry = 0
        self.sent_acks = 0
        self.sent_close = 0

    def _send(self, data: bytes) -> None:
        self.capture.add(OUT, data)
        self.transport.send(data)

    def _packet(self, space: Space, frames: list, pad_to: int = 0) -> bytes:
        ex = self.extractor
        payload = encode_frames(frames)
        if space is Space.INITIAL:
            ptype, keys, token = PacketType.INITIAL, ex.initial_keys.client, ex.retry_token
        else:
            ptype, keys, token = PacketType.HANDSHAKE, ex.handshake_keys.client, b""
        dcid = ex.server_cid if ex.server_cid is not None else ex.dcid
        head = build_long_header(ptype, QUIC_V1, dcid, self.scid, token=token, payload_length=0)
        short = pad_to - (len(head) + 4 + len(payload) + 16)
        if short > 0:
            payload += encode_frames([Padding(short)])
        if len(payload) < 4:
            payload += bytes(4 - len(payload))  # header-protection sample needs 4 bytes
        header = build_long_header(ptype, QUIC_V1, dcid, self.scid, token=token,
                                   payload_length=len(payload))
        pn = self.pn[space]
        self.pn[space] += 1
        return pktcrypto.protect_packet(keys, header, payload, packet_number=pn, pn_length=4)

    def _datagram(self, initial_frames: list, handshake_frames: list | None = None) -> bytes:
        tail = b""
        if handshake_frames and self.extractor.handshake_keys is not None:
            tail = self._packet(Space.HANDSHAKE, handshake_frames)
        head = self._packet(Space.INITIAL, initial_frames,
                            pad_to=MIN_INITIAL_DATAGRAM - len(tail))
        return head + tail

    def _send_client_hello(self) -> None:
        self._send(self._datagram([Crypto(0, self.client_hello)]))

    def _acks(self) -> tuple[list, list]:
        ex = self.extractor
        init = [ack_for(ex.received[Space.INITIAL])] if ex.received[Space.INITIAL] else [Ping()]
        hs = [ack_for(ex.received[Space.HANDSHAKE])] if ex.received[Space.HANDSHAKE] else []
        return init, hs

    def _send_ack(self) -> None:
        init, hs = self._acks()
        self._send(self._datagram(init, hs))
        for space in self.extractor.ack_pending:
            self.extractor.ack_pending[space] = False
        self.sent_acks += 1

    def _send_close(self) -> None:
        close = ConnectionClose.make(0, "", frame_type=0)
        self._send(self._datagram([close], [close]))
        self.sent_close += 1

    def run(self) -> HandshakeObservation:
        ex = self.extractor
        cfg = self.cfg
        try:
            self._send_client_hello()
            self.sent_first = 1
            while True:
                data = self.transport.recv(cfg.response_timeout)
                if data is None:
                    if ex.useful and not ex.done:
                        if self.sent_acks < cfg.max_round_trips:
                            self._send_ack()
                            continue
                        break
                    if not ex.useful and self.sent_first < 1 + cfg.retries:
                        self._send_client_hello()
                        self.sent_first += 1
                        continue
                    break
                self.capture.add(IN, data)
                retry_before = ex.retry_seen
                ex.feed(data)
                if ex.done:
                    break
                if ex.retry_seen and not retry_before:
                    self._send_client_hello()
                    self.sent_retry += 1
                    continue
                if any(ex.ack_pending.values()) and self.sent_acks < cfg.max_round_trips:
                    self._send_ack()
        finally:
            try:
                if self.capture.inbound() and not ex.vn_versions:
                    self._send_close()
            except (ProbeError, CryptoError, WireError) as exc:
                log.debug("close to %s failed: %s", self.target.endpoint, exc)
            self.transport.close()
        return ex.observation(self.capture)


def probe_handshake(target: Target, alpn: Sequence[str], cfg: ProbeConfig | None = None,
                    transport_factory: TransportFactory | None = None) -> HandshakeObservation:
    """Run one handshake probe; timeouts come back as ``Outcome.TIMEOUT``."""
    cfg = cfg or ProbeConfig()
    factory = transport_factory or udp_transport_factory()
    return HandshakeSession(target, alpn, cfg, factory(target)).run()


def probe_version_negotiation(target: Target, cfg: ProbeConfig | None = None,
                              transport_factory: TransportFactory | None = None
                              ) -> VersionNegotiationResult:
    cfg = cfg or ProbeConfig()
    factory = transport_factory or udp_transport_factory()
    transport = factory(target)
    dcid, scid = os.urandom(CLIENT_CID_LENGTH), os.urandom(CLIENT_CID_LENGTH)
    capture = Capture(_capture_meta("vn", target, reserved_version=cfg.reserved_version,
                                    original_dcid=dcid.hex()))
    datagram = build_vn_trigger_datagram(dcid, scid, cfg.reserved_version)
    try:
        for _ in range(1 + cfg.retries):
            capture.add(OUT, datagram)
            transport.send(datagram)
            data = transport.recv(cfg.response_timeout)
            if data is not None:
                capture.add(IN, data)
                break
    finally:
        transport.close()
    return extract_version_negotiation(capture)


@dataclass
class Disambiguation:
    orders: list[list[int]]
    observations: list[HandshakeObservation]
    attempts: int


def probe_disambiguate(target: Target, n: int = 2, cfg: ProbeConfig | None = None,
                       transport_factory: TransportFactory | None = None) -> Disambiguation:
    """Repeat the h3 handshake ``n`` times and collect transport-parameter orders."""
    observations, orders = [], []
    for _ in range(n):
        obs = probe_handshake(target, [ALPN_H3], cfg, transport_factory)
        observations.append(obs)
        if obs.tp_order is not None:
            orders.append(obs.tp_order)
    return Disambiguation(orders, observations, n)
