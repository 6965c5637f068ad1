"""Record, replay and generate golden captures; mutate captured flights."""
from __future__ import annotations

import json
import random
from pathlib import Path

from .. import pktcrypto, tlsmini
from ..capture import IN, Capture, CaptureRecord
from ..pktcrypto import KeyExchange
from ..probe import (
    ALPN_H3,
    ALPN_INVALID,
    HandshakeObservation,
    ProbeConfig,
    VersionNegotiationResult,
    probe_handshake,
    probe_version_negotiation,
    replay,
)
from ..wire import Crypto, PacketType, encode_frames, encode_varint, iter_packets, parse_frames, decode_varint
from .farm import LocalLab
from .scripts import SCRIPTS

SUFFIX = ".qfcap"
GOLDEN_PROBES = ("vn", "invalid", "h3", "h3-rh1", "h3-rh2")


def record_flight(obs: HandshakeObservation | VersionNegotiationResult, path: str | Path) -> Path:
    if obs.raw_flight is None:
        raise ValueError("observation carries no raw flight")
    return obs.raw_flight.save(path)


def replay_flight(path: str | Path) -> HandshakeObservation | VersionNegotiationResult:
    return replay(Capture.load(path))


def load_flight_dir(directory: str | Path) -> list[HandshakeObservation]:
    """Replay every handshake capture in one target directory, in name order."""
    out = []
    for path in sorted(Path(directory).glob(f"*{SUFFIX}")):
        result = replay_flight(path)
        if isinstance(result, HandshakeObservation):
            out.append(result)
    return out


def generate_golden(outdir: str | Path, seed: int = 0, scripts=SCRIPTS) -> dict:
    """Write ``<outdir>/<library>/<probe>.qfcap`` for every script plus a manifest."""
    outdir = Path(outdir)
    lab = LocalLab(scripts, seed)
    cfg = ProbeConfig(response_timeout=0.5)
    manifest = {"seed": seed, "libraries": {}}
    for s in scripts:
        target = lab.target(s.library)
        d = outdir / s.library
        files = {}
        results = {
            "vn": probe_version_negotiation(target, cfg, lab),
            "invalid": probe_handshake(target, [ALPN_INVALID], cfg, lab),
        }
        for name in ("h3", "h3-rh1", "h3-rh2"):
            results[name] = probe_handshake(target, [ALPN_H3], cfg, lab)
        for name, res in results.items():
            files[name] = record_flight(res, d / f"{name}{SUFFIX}").name
        manifest["libraries"][s.library] = {"expected": s.library, "files": files}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _mutate_params(tps: list[tuple[int, bytes]], rng: random.Random) -> list[tuple[int, bytes]]:
    out = []
    for pid, value in tps:
        new = value
        while new == value and value:
            try:
                _, n = decode_varint(value)
            except ValueError:
                n = -1
            if n == len(value):
                new = encode_varint(rng.randrange(1 << (8 * n - 2)), n)
            else:
                new = rng.randbytes(len(value))
        out.append((pid, new))
    return out


def mutate_tp_values(capture: Capture, seed: int = 0) -> Capture:
    """Re-protect the server's EncryptedExtensions with every transport-parameter value changed.

    Ids, order and encoded lengths are kept, so CRYPTO offsets and packet
    sizes stay as captured.
    """
    meta = capture.meta
    rng = random.Random(seed)
    kx = KeyExchange.from_private(bytes.fromhex(meta["client_private"]))
    ch = bytes.fromhex(meta["client_hello"])
    initial_dcid = bytes.fromhex(meta["original_dcid"])

    # first pass: recover the server hello and the full handshake stream
    initial = tlsmini.CryptoBuffer()
    hs_keys = None
    hs_stream = tlsmini.CryptoBuffer()
    plain: dict[tuple[int, int], tuple[bytes, int, bytes, int]] = {}
    largest = {PacketType.INITIAL: -1, PacketType.HANDSHAKE: -1}
    for n, rec in enumerate(capture.records):
        if rec.direction != IN:
            continue
        for hdr, start, end in iter_packets(rec.data):
            pkt = rec.data[start:end]
            if hdr.packet_type is PacketType.RETRY:
                initial_dcid = hdr.scid
                continue
            if hdr.packet_type is PacketType.INITIAL:
                keys = pktcrypto.derive_initial_keys(initial_dcid).server
            elif hdr.packet_type is PacketType.HANDSHAKE and hs_keys is not None:
                keys = hs_keys.server
            else:
                continue
            body, pn, plain_header = pktcrypto.unprotect_raw(keys, pkt, hdr.pn_offset,
                                                  largest_pn=largest[hdr.packet_type])
            largest[hdr.packet_type] = max(largest[hdr.packet_type], pn)
            for f in parse_frames(body):
                if isinstance(f, Crypto):
                    (initial if hdr.packet_type is PacketType.INITIAL else hs_stream).add(f.offset, f.data)
            if hdr.packet_type is PacketType.HANDSHAKE:
                plain[(n, start)] = (body, pn, plain_header[: hdr.pn_offset], len(plain_header) - hdr.pn_offset)
            if hs_keys is None and hdr.packet_type is PacketType.INITIAL:
                try:
                    _, sh, _ = tlsmini.split_handshake(initial.contiguous())
                except tlsmini.IncompleteMessage:
                    continue
                summary = tlsmini.parse_server_hello(sh)
                t = pktcrypto.TranscriptState()
                t.add(ch)
                t.add(sh)
                hs_keys = pktcrypto.derive_handshake_keys(
                    pktcrypto.x25519_shared(kx, summary.server_key_share), t, summary.cipher)
    if hs_keys is None:
        raise ValueError("capture holds no ServerHello")
    stream = hs_stream.contiguous()
    _, ee, _ = tlsmini.split_handshake(stream)
    summary = tlsmini.parse_encrypted_extensions(ee)
    params = _mutate_params(summary.tp_order, rng)
    new_ee = tlsmini.build_encrypted_extensions(transport_params=params, alpn=summary.alpn)
    if len(new_ee) != len(ee) or summary.ext_order not in ([0x10, 0x39], [0x39]):
        raise ValueError("EncryptedExtensions layout cannot be rebuilt byte-compatibly")
    new_stream = new_ee + stream[len(ee):]

    # second pass: rebuild each handshake packet around the mutated stream
    records = []
    for n, rec in enumerate(capture.records):
        if rec.direction != IN:
            records.append(rec)
            continue
        data = bytearray()
        for hdr, start, end in iter_packets(rec.data):
            key = (n, start)
            if key not in plain:
                data += rec.data[start:end]
                continue
            body, pn, header, pn_length = plain[key]
            frames = [Crypto(f.offset, new_stream[f.offset : f.offset + len(f.data)])
                      if isinstance(f, Crypto) else f for f in parse_frames(body)]
            new_body = encode_frames(frames)
            if len(new_body) != len(body):
                new_body = new_body + bytes(len(body) - len(new_body))
            data += pktcrypto.protect_packet(hs_keys.server, header, new_body, packet_number=pn,
                                             pn_length=pn_length)
        records.append(CaptureRecord(rec.direction, rec.timestamp, bytes(data)))
    return Capture(dict(meta, mutated=seed), records)
