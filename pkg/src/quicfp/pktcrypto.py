"""Packet protection for the Initial and Handshake spaces.

Initial key derivation, AEAD seal/open with header protection, and the TLS 1.3
key-schedule subset that turns an x25519 shared secret plus the
ClientHello/ServerHello transcript into Handshake keys.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives import serialization

from .wire import QUIC_V1, LongHeader, WireError, parse_long_header

INITIAL_SALT_V1 = bytes.fromhex("38762cf7f55934b34d179ae6a4c80cadccbb7f0a")
RETRY_KEY_V1 = bytes.fromhex("be0c690b9f66575a1d766b54e368c84e")
RETRY_NONCE_V1 = bytes.fromhex("461599d35d632bf2239825bb")

TLS_AES_128_GCM_SHA256 = 0x1301
TLS_AES_256_GCM_SHA384 = 0x1302
TLS_CHACHA20_POLY1305_SHA256 = 0x1303

SAMPLE_LENGTH = 16
TAG_LENGTH = 16


class CryptoError(Exception):
    """AEAD failure, bad key material, or an unsupported negotiation."""


class Aead(enum.Enum):
    AES_128_GCM = "AES-128-GCM"
    AES_256_GCM = "AES-256-GCM"
    CHACHA20_POLY1305 = "ChaCha20-Poly1305"

    @property
    def key_length(self) -> int:
        return 16 if self is Aead.AES_128_GCM else 32


class HashAlg(enum.Enum):
    SHA256 = "sha256"
    SHA384 = "sha384"

    @property
    def digest_size(self) -> int:
        return 32 if self is HashAlg.SHA256 else 48

    def new(self, data: bytes = b""):
        return hashlib.new(self.value, data)


CIPHER_SUITES: dict[int, tuple[Aead, HashAlg]] = {
    TLS_AES_128_GCM_SHA256: (Aead.AES_128_GCM, HashAlg.SHA256),
    TLS_AES_256_GCM_SHA384: (Aead.AES_256_GCM, HashAlg.SHA384),
    TLS_CHACHA20_POLY1305_SHA256: (Aead.CHACHA20_POLY1305, HashAlg.SHA256),
}


class Space(enum.Enum):
    INITIAL = "initial"
    HANDSHAKE = "handshake"


# -- HKDF ------------------------------------------------------------------------

def hkdf_extract(hash_alg: HashAlg, salt: bytes, ikm: bytes) -> bytes:
    return hmac.new(salt, ikm, hash_alg.value).digest()


def hkdf_expand(hash_alg: HashAlg, prk: bytes, info: bytes, length: int) -> bytes:
    out = b""
    block = b""
    counter = 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hash_alg.value).digest()
        out += block
        counter += 1
    return out[:length]


def hkdf_label(label: bytes, context: bytes, length: int) -> bytes:
    full = b"tls13 " + label
    return struct.pack("!HB", length, len(full)) + full + bytes([len(context)]) + context


def hkdf_expand_label(hash_alg: HashAlg, secret: bytes, label: bytes,
                      context: bytes, length: int) -> bytes:
    return hkdf_expand(hash_alg, secret, hkdf_label(label, context, length), length)


# -- keys ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionalKeys:
    key: bytes
    iv: bytes
    hp: bytes
    aead: Aead = Aead.AES_128_GCM
    hash: HashAlg = HashAlg.SHA256
    secret: bytes = b""

    def __post_init__(self):
        if len(self.key) != self.aead.key_length:
            raise CryptoError(f"{self.aead.value} needs a {self.aead.key_length}-byte key")
        if len(self.iv) != 12:
            raise CryptoError("IV must be 12 bytes")

    @classmethod
    def from_secret(cls, secret: bytes, aead: Aead = Aead.AES_128_GCM,
                    hash_alg: HashAlg = HashAlg.SHA256) -> "DirectionalKeys":
        n = aead.key_length
        return cls(
            key=hkdf_expand_label(hash_alg, secret, b"quic key", b"", n),
            iv=hkdf_expand_label(hash_alg, secret, b"quic iv", b"", 12),
            hp=hkdf_expand_label(hash_alg, secret, b"quic hp", b"", n),
            aead=aead, hash=hash_alg, secret=secret,
        )

    def header_mask(self, sample: bytes) -> bytes:
        if len(sample) != SAMPLE_LENGTH:
            raise CryptoError("header protection sample must be 16 bytes")
        if self.aead is Aead.CHACHA20_POLY1305:
            enc = Cipher(algorithms.ChaCha20(self.hp, sample), mode=None).encryptor()
            return enc.update(bytes(5))
        enc = Cipher(algorithms.AES(self.hp), modes.ECB()).encryptor()
        return (enc.update(sample) + enc.finalize())[:5]

    def nonce(self, packet_number: int) -> bytes:
        pn = packet_number.to_bytes(12, "big")
        return bytes(a ^ b for a, b in zip(self.iv, pn))

    def _aead(self):
        if self.aead is Aead.CHACHA20_POLY1305:
            return ChaCha20Poly1305(self.key)
        return AESGCM(self.key)

    def seal(self, packet_number: int, plaintext: bytes, associated: bytes) -> bytes:
        return self._aead().encrypt(self.nonce(packet_number), plaintext, associated)

    def open(self, packet_number: int, ciphertext: bytes, associated: bytes) -> bytes:
        try:
            return self._aead().decrypt(self.nonce(packet_number), ciphertext, associated)
        except InvalidTag:
            raise CryptoError("AEAD authentication failed") from None


@dataclass(frozen=True)
class SpaceKeys:
    client: DirectionalKeys
    server: DirectionalKeys
    space: Space

    def __post_init__(self):
        if (self.client.aead, self.client.hash) != (self.server.aead, self.server.hash):
            raise CryptoError("client and server keys disagree on AEAD/hash")

    def sending(self, is_client: bool) -> DirectionalKeys:
        return self.client if is_client else self.server

    def receiving(self, is_client: bool) -> DirectionalKeys:
        return self.server if is_client else self.client


def initial_keys_for_salt(dcid: bytes, salt: bytes) -> SpaceKeys:
    initial = hkdf_extract(HashAlg.SHA256, salt, dcid)
    client = hkdf_expand_label(HashAlg.SHA256, initial, b"client in", b"", 32)
    server = hkdf_expand_label(HashAlg.SHA256, initial, b"server in", b"", 32)
    return SpaceKeys(DirectionalKeys.from_secret(client), DirectionalKeys.from_secret(server),
                     Space.INITIAL)


def derive_initial_keys(dcid: bytes, version: int = QUIC_V1) -> SpaceKeys:
    """Initial-space keys for both directions, from the client's original DCID."""
    if version != QUIC_V1:
        raise CryptoError(f"unsupported version {version:#010x}; only QUIC v1 keys are derived")
    return initial_keys_for_salt(dcid, INITIAL_SALT_V1)


# -- packet protection --------------------------------------------------------------

def decode_packet_number(truncated: int, pn_length: int, largest: int) -> int:
    """Recover a full packet number from its truncated encoding (RFC 9000 A.3)."""
    nbits = pn_length * 8
    expected = largest + 1
    win = 1 << nbits
    hwin = win // 2
    mask = win - 1
    candidate = (expected & ~mask) | truncated
    if candidate <= expected - hwin and candidate < (1 << 62) - win:
        return candidate + win
    if candidate > expected + hwin and candidate >= win:
        return candidate - win
    return candidate


def protect_packet(keys: DirectionalKeys, header: bytes, payload: bytes, *,
                   packet_number: int, pn_length: int = 4, long_header: bool = True) -> bytes:
    """Encrypt ``payload`` and apply header protection.

    ``header`` ends right before the packet-number field and must already
    encode ``pn_length`` in its first byte and, for long headers, a length
    field of ``pn_length + len(payload) + 16``.
    """
    if not 1 <= pn_length <= 4:
        raise ValueError("packet number length must be 1..4")
    if long_header:
        probe = header + bytes(pn_length) + bytes(len(payload) + TAG_LENGTH)
        hdr, _ = parse_long_header(probe)
        if hdr.length != pn_length + len(payload) + TAG_LENGTH:
            raise ValueError(
                f"length field {hdr.length} does not match pn + payload + tag "
                f"({pn_length + len(payload) + TAG_LENGTH})")
    if (header[0] & 0x03) + 1 != pn_length:
        raise ValueError("first byte does not encode the packet-number length")
    pn_bytes = (packet_number & ((1 << (8 * pn_length)) - 1)).to_bytes(pn_length, "big")
    plain_header = header + pn_bytes
    sealed = keys.seal(packet_number, payload, plain_header)
    pn_offset = len(header)
    sample_at = 4 - pn_length
    if sample_at + SAMPLE_LENGTH > len(sealed):
        raise CryptoError("packet too short to sample for header protection")
    mask = keys.header_mask(sealed[sample_at : sample_at + SAMPLE_LENGTH])
    first = header[0] ^ (mask[0] & (0x0F if long_header else 0x1F))
    protected_pn = bytes(b ^ m for b, m in zip(pn_bytes, mask[1:]))
    return bytes([first]) + header[1:pn_offset] + protected_pn + sealed


def unprotect_raw(keys: DirectionalKeys, packet: bytes, pn_offset: int, *,
                  largest_pn: int = -1, long_header: bool = True) -> tuple[bytes, int, bytes]:
    """Remove protection from ``packet``; return (plaintext, packet number, plain header)."""
    sample_at = pn_offset + 4
    if sample_at + SAMPLE_LENGTH > len(packet):
        raise CryptoError("sample window out of bounds")
    mask = keys.header_mask(packet[sample_at : sample_at + SAMPLE_LENGTH])
    first = packet[0] ^ (mask[0] & (0x0F if long_header else 0x1F))
    pn_length = (first & 0x03) + 1
    pn_bytes = bytes(b ^ m for b, m in zip(packet[pn_offset : pn_offset + pn_length], mask[1:]))
    truncated = int.from_bytes(pn_bytes, "big")
    pn = decode_packet_number(truncated, pn_length, largest_pn)
    plain_header = bytes([first]) + packet[1:pn_offset] + pn_bytes
    plaintext = keys.open(pn, packet[pn_offset + pn_length :], plain_header)
    return plaintext, pn, plain_header


def unprotect_packet(keys: DirectionalKeys, packet: bytes, header: LongHeader,
                     largest_pn: int = -1) -> tuple[bytes, int]:
    """Open one long-header packet; ``packet`` starts at its first byte.

    Only ``header.packet_size`` bytes are used, so a whole coalesced
    datagram slice may be passed.
    """
    if header.pn_offset is None:
        raise WireError(f"{header.packet_type.name} packets carry no packet number")
    plaintext, pn, _ = unprotect_raw(keys, packet[: header.packet_size], header.pn_offset,
                                     largest_pn=largest_pn)
    header.packet_number = pn
    return plaintext, pn


def retry_integrity_tag(original_dcid: bytes, retry_without_tag: bytes) -> bytes:
    pseudo = bytes([len(original_dcid)]) + original_dcid + retry_without_tag
    return AESGCM(RETRY_KEY_V1).encrypt(RETRY_NONCE_V1, b"", pseudo)


# -- key exchange and TLS key schedule ------------------------------------------------

@dataclass(frozen=True)
class KeyExchange:
    private: bytes
    public: bytes
    group: str = "x25519"

    @classmethod
    def generate(cls) -> "KeyExchange":
        return cls.from_private(X25519PrivateKey.generate().private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
            serialization.NoEncryption()))

    @classmethod
    def from_private(cls, private: bytes) -> "KeyExchange":
        if len(private) != 32:
            raise CryptoError("x25519 private key must be 32 bytes")
        pub = X25519PrivateKey.from_private_bytes(private).public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return cls(private, pub)


def x25519_shared(own: KeyExchange, peer_public: bytes) -> bytes:
    if len(peer_public) != 32:
        raise CryptoError("x25519 public key must be 32 bytes")
    priv = X25519PrivateKey.from_private_bytes(own.private)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError:
        # the backend refuses low-order points outright
        raise CryptoError("x25519 shared secret is all zero") from None
    if shared == bytes(32):
        raise CryptoError("x25519 shared secret is all zero")
    return shared


class TranscriptState:
    """Running hash over handshake messages, in TLS transcript order."""

    def __init__(self, hash_alg: HashAlg = HashAlg.SHA256):
        self.hash_alg = hash_alg
        self.messages: list[bytes] = []

    def add(self, message: bytes) -> None:
        self.messages.append(bytes(message))

    def copy(self) -> "TranscriptState":
        t = TranscriptState(self.hash_alg)
        t.messages = list(self.messages)
        return t

    def digest(self) -> bytes:
        h = self.hash_alg.new()
        for m in self.messages:
            h.update(m)
        return h.digest()

    def __len__(self) -> int:
        return len(self.messages)


def derive_handshake_keys(shared_secret: bytes, transcript: TranscriptState,
                          cipher: int) -> SpaceKeys:
    if cipher not in CIPHER_SUITES:
        raise CryptoError(f"unsupported cipher suite {cipher:#06x}")
    if len(transcript) != 2:
        raise CryptoError("transcript must hold exactly ClientHello and ServerHello")
    aead, hash_alg = CIPHER_SUITES[cipher]
    n = hash_alg.digest_size
    early = hkdf_extract(hash_alg, bytes(n), bytes(n))
    derived = hkdf_expand_label(hash_alg, early, b"derived", hash_alg.new().digest(), n)
    hs_secret = hkdf_extract(hash_alg, derived, shared_secret)
    th = TranscriptState(hash_alg)
    th.messages = transcript.messages
    digest = th.digest()
    c_hs = hkdf_expand_label(hash_alg, hs_secret, b"c hs traffic", digest, n)
    s_hs = hkdf_expand_label(hash_alg, hs_secret, b"s hs traffic", digest, n)
    return SpaceKeys(DirectionalKeys.from_secret(c_hs, aead, hash_alg),
                     DirectionalKeys.from_secret(s_hs, aead, hash_alg), Space.HANDSHAKE)
