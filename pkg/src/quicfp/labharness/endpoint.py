"""Server side of one scripted lab connection."""
from __future__ import annotations

import random
from collections import deque

from .. import pktcrypto, tlsmini
from ..pktcrypto import KeyExchange, Space
from ..wire import (
    MIN_INITIAL_DATAGRAM,
    QUIC_V1,
    Ack,
    ConnectionClose,
    Crypto,
    PacketType,
    WireError,
    ack_for,
    build_long_header,
    build_retry,
    build_version_negotiation,
    encode_frames,
    encode_varint,
    iter_packets,
    parse_frames,
)
from .scripts import (
    CloseNoReason,
    CloseWithReason,
    ContinueWithoutAlpnExt,
    FlightScript,
    RandomizedSet,
    Silent,
)

SERVER_CIPHERS = (pktcrypto.TLS_AES_128_GCM_SHA256, pktcrypto.TLS_CHACHA20_POLY1305_SHA256)


def draw_tp_order(script: FlightScript, rng: random.Random) -> list[int]:
    """One emitted order: the fixed list, or a uniform permutation of the set."""
    if isinstance(script.tp_behavior, RandomizedSet):
        ids = sorted(script.tp_behavior.ids)
        rng.shuffle(ids)
    else:
        ids = list(script.tp_behavior.ids)
    if script.grease_tp is not None:
        ids.insert(min(2, len(ids)), script.grease_tp)
    return ids


def tp_value(tp_id: int, rng: random.Random, original_dcid: bytes, scid: bytes) -> bytes:
    if tp_id == tlsmini.TP_ORIGINAL_DCID:
        return original_dcid
    if tp_id == tlsmini.TP_INITIAL_SCID:
        return scid
    if tp_id == tlsmini.TP_STATELESS_RESET_TOKEN:
        return rng.randbytes(16)
    if tp_id == tlsmini.TP_RETRY_SCID:
        return scid
    defaults = {0x1: 30000, 0x3: 1472, 0x4: 1 << 20, 0x5: 1 << 18, 0x6: 1 << 18, 0x7: 1 << 18,
                0x8: 100, 0x9: 3, 0xA: 3, 0xB: 25, 0xE: 4}
    if tp_id in defaults:
        return encode_varint(defaults[tp_id])
    return rng.randbytes(rng.randrange(0, 8))


class ServerSession:
    """Answers one client according to its script; ``handle`` maps a datagram to replies."""

    def __init__(self, script: FlightScript, rng: random.Random):
        self.script = script
        self.rng = rng
        self.scid = rng.randbytes(8)
        self.client_scid: bytes | None = None
        self.original_dcid: bytes | None = None
        self.retry_token: bytes | None = None
        self.initial_keys: pktcrypto.SpaceKeys | None = None
        self.handshake_keys: pktcrypto.SpaceKeys | None = None
        self.ch_buffer = tlsmini.CryptoBuffer()
        self.largest = {Space.INITIAL: -1, Space.HANDSHAKE: -1}
        self.received = {Space.INITIAL: [], Space.HANDSHAKE: []}
        self.pn = {Space.INITIAL: 0, Space.HANDSHAKE: 0}
        self.state = "new"  # new | responded | silent | closed
        self.response: list[bytes] = []
        self.held: deque[bytes] = deque()
        self.emitted_tp_order: list[int] | None = None
        self.ext_signature: str | None = None
        self.client_alpn: list[str] = []
        self.client_sni: str | None = None

    # -- inbound --------------------------------------------------------------------

    def handle(self, datagram: bytes) -> list[bytes]:
        if self.state == "closed":
            return []
        try:
            packets = list(iter_packets(datagram))
        except WireError:
            return []
        out: list[bytes] = []
        ch_repeat = False
        for hdr, start, end in packets:
            if hdr.packet_type is PacketType.VERSION_NEGOTIATION:
                continue
            if hdr.version != QUIC_V1:
                if len(datagram) >= MIN_INITIAL_DATAGRAM and not self.received[Space.INITIAL]:
                    return [build_version_negotiation(hdr.scid, hdr.dcid, self.script.versions)]
                return []
            packet = datagram[start:end]
            try:
                if hdr.packet_type is PacketType.INITIAL:
                    if self.original_dcid is None:
                        self.original_dcid = hdr.dcid
                        self.client_scid = hdr.scid
                    if self.script.retry and self.retry_token is None:
                        return [self._retry(hdr)]
                    if self.script.retry and hdr.token != self.retry_token:
                        continue
                    if self.initial_keys is None:
                        self.initial_keys = pktcrypto.derive_initial_keys(hdr.dcid)
                    frames = self._open(Space.INITIAL, self.initial_keys.client, hdr, packet)
                elif hdr.packet_type is PacketType.HANDSHAKE and self.handshake_keys is not None:
                    frames = self._open(Space.HANDSHAKE, self.handshake_keys.client, hdr, packet)
                else:
                    continue
            except (WireError, pktcrypto.CryptoError):
                continue
            for frame in frames:
                if isinstance(frame, Crypto):
                    if self.state != "new" and frame.offset == 0:
                        ch_repeat = True
                    self.ch_buffer.add(frame.offset, frame.data)
                elif isinstance(frame, ConnectionClose):
                    self.state = "closed"
                    return out
                elif isinstance(frame, Ack) and self.held:
                    out.extend(self.held)
                    self.held.clear()
        if self.state == "new":
            stream = self.ch_buffer.contiguous()
            try:
                _, msg, _ = tlsmini.split_handshake(stream)
            except tlsmini.IncompleteMessage:
                return out
            out.extend(self._respond(msg))
        elif ch_repeat and self.state == "responded":
            out.extend(self.response)
        return out

    def _open(self, space: Space, keys, hdr, packet: bytes) -> list:
        plaintext, pn = pktcrypto.unprotect_packet(keys, packet, hdr, self.largest[space])
        self.largest[space] = max(self.largest[space], pn)
        self.received[space].append(pn)
        return parse_frames(plaintext)

    def _retry(self, hdr) -> bytes:
        self.retry_token = self.rng.randbytes(24)
        new_scid = self.rng.randbytes(8)
        body = build_retry(QUIC_V1, hdr.scid, new_scid, self.retry_token, b"")
        tag = pktcrypto.retry_integrity_tag(hdr.dcid, body)
        self.scid = new_scid
        return body + tag

    # -- outbound -------------------------------------------------------------------

    def _packet(self, space: Space, frames: list) -> bytes:
        if space is Space.INITIAL:
            ptype, keys = PacketType.INITIAL, self.initial_keys.server
        else:
            ptype, keys = PacketType.HANDSHAKE, self.handshake_keys.server
        payload = encode_frames(frames)
        if len(payload) < 4:
            payload += bytes(4 - len(payload))
        header = build_long_header(ptype, QUIC_V1, self.client_scid, self.scid,
                                   payload_length=len(payload))
        pn = self.pn[space]
        self.pn[space] += 1
        return pktcrypto.protect_packet(keys, header, payload, packet_number=pn)

    def _initial_ack(self) -> list:
        return [ack_for(self.received[Space.INITIAL])] if self.received[Space.INITIAL] else []

    def _close_datagram(self, action, alpn: list[str]) -> bytes:
        if isinstance(action, CloseWithReason):
            closes = [ConnectionClose.make(action.code, action.reason_template.format(alpn=",".join(alpn)),
                                           frame_type=action.frame_type)]
            closes += [ConnectionClose.make(code, reason, frame_type=0) for code, reason in action.extra]
        else:
            closes = [ConnectionClose.make(action.code, "", frame_type=action.frame_type)]
        out = self._packet(Space.INITIAL, self._initial_ack() + [closes[0]])
        for extra in closes[1:]:
            out += self._packet(Space.INITIAL, [extra])
        return out

    def _respond(self, ch: bytes) -> list[bytes]:
        info = tlsmini.parse_client_hello(ch)
        self.client_alpn, self.client_sni = info.alpn, info.sni
        s = self.script
        action = None
        if not s.sni_policy.accepts(info.sni):
            action = s.sni_policy.on_failure
        elif not set(info.alpn) & set(s.supported_alpn):
            action = s.alpn_failure
        if isinstance(action, Silent):
            self.state = "silent"
            return []
        if isinstance(action, (CloseWithReason, CloseNoReason)):
            self.state = "closed"
            return [self._close_datagram(action, info.alpn)]
        negotiated = None if isinstance(action, ContinueWithoutAlpnExt) else \
            next(p for p in info.alpn if p in s.supported_alpn)
        cipher = next((c for c in info.ciphers if c in SERVER_CIPHERS), None)
        if cipher is None or info.x25519_public is None:
            self.state = "closed"
            return [self._close_datagram(CloseWithReason(0x128, "handshake failure"), info.alpn)]

        self.ext_signature = s.ext_signatures[0] if len(s.ext_signatures) == 1 \
            else self.rng.choice(s.ext_signatures)
        kx = KeyExchange.from_private(self.rng.randbytes(32))
        sh = tlsmini.build_server_hello(random=self.rng.randbytes(32), session_echo=info.session_id,
                                        cipher=cipher, public=kx.public,
                                        ext_signature=self.ext_signature)
        transcript = pktcrypto.TranscriptState()
        transcript.add(ch)
        transcript.add(sh)
        shared = pktcrypto.x25519_shared(kx, info.x25519_public)
        self.handshake_keys = pktcrypto.derive_handshake_keys(shared, transcript, cipher)

        order = draw_tp_order(s, self.rng)
        self.emitted_tp_order = order
        params = [(i, tp_value(i, self.rng, self.original_dcid, self.scid)) for i in order]
        ee = tlsmini.build_encrypted_extensions(transport_params=params, alpn=negotiated)

        init = self._packet(Space.INITIAL, self._initial_ack() + [Crypto(0, sh)])
        if s.flight_mode == "coalesced":
            flight = [init + self._packet(Space.HANDSHAKE, [Crypto(0, ee)])]
        elif s.flight_mode == "split":
            cut = len(ee) // 2
            second = self._packet(Space.HANDSHAKE, [Crypto(cut, ee[cut:])])
            first = self._packet(Space.HANDSHAKE, [Crypto(0, ee[:cut])])
            flight = [init, second, first]
        else:
            self.held.append(self._packet(Space.HANDSHAKE, [Crypto(0, ee)]))
            flight = [init]
        self.state = "responded"
        self.response = flight
        return list(flight)
