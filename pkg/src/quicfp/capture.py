"""Raw-flight capture files.

Layout::

    b"QFCAP1\\n"
    u32 meta length, meta as UTF-8 JSON
    repeated: u8 direction (0 out, 1 in), f64 timestamp, u32 length, datagram

All integers big-endian. The meta block carries what offline extraction
needs: the client's x25519 private key, the original DCID and the exact
ClientHello bytes.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MAGIC = b"QFCAP1\n"
_REC = struct.Struct("!BdI")
OUT, IN = "out", "in"


class CaptureError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"corrupt capture: {message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CaptureRecord:
    direction: str
    timestamp: float
    data: bytes


@dataclass
class Capture:
    meta: dict[str, Any] = field(default_factory=dict)
    records: list[CaptureRecord] = field(default_factory=list)

    def add(self, direction: str, data: bytes, timestamp: float | None = None) -> None:
        if timestamp is None:
            timestamp = time.time()
        self.records.append(CaptureRecord(direction, timestamp, bytes(data)))

    def inbound(self) -> list[bytes]:
        return [r.data for r in self.records if r.direction == IN]

    def outbound(self) -> list[bytes]:
        return [r.data for r in self.records if r.direction == OUT]

    def dumps(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out = bytearray(MAGIC)
        out += struct.pack("!I", len(meta)) + meta
        for r in self.records:
            out += _REC.pack(0 if r.direction == OUT else 1, r.timestamp, len(r.data))
            out += r.data
        return bytes(out)

    @classmethod
    def loads(cls, blob: bytes) -> "Capture":
        if not blob.startswith(MAGIC):
            raise CaptureError("bad magic", 0)
        pos = len(MAGIC)
        if pos + 4 > len(blob):
            raise CaptureError("truncated meta length", pos)
        (n,) = struct.unpack_from("!I", blob, pos)
        pos += 4
        if pos + n > len(blob):
            raise CaptureError("truncated meta block", pos)
        try:
            meta = json.loads(blob[pos : pos + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CaptureError(f"meta is not JSON ({exc})", pos) from None
        pos += n
        records = []
        while pos < len(blob):
            if pos + _REC.size > len(blob):
                raise CaptureError("truncated record header", pos)
            d, ts, length = _REC.unpack_from(blob, pos)
            if d not in (0, 1):
                raise CaptureError(f"bad direction byte {d}", pos)
            start = pos + _REC.size
            if start + length > len(blob):
                raise CaptureError(f"record claims {length} bytes, {len(blob) - start} left", pos)
            records.append(CaptureRecord(OUT if d == 0 else IN, ts, blob[start : start + length]))
            pos = start + length
        return cls(meta, records)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Capture":
        return cls.loads(Path(path).read_bytes())
