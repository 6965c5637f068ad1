"""Batch scans: target ingestion, blocklist, rate limiting, per-target pipeline, merging."""
from __future__ import annotations

import ipaddress
import json
import logging
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from .fingerprint import Classification, FingerprintDb, Method, classify, load_db
from .probe import (
    ALPN_H3,
    ALPN_INVALID,
    HandshakeObservation,
    Outcome,
    ProbeConfig,
    Target,
    Transport,
    TransportFactory,
    probe_disambiguate,
    probe_handshake,
    probe_version_negotiation,
    udp_transport_factory,
)

log = logging.getLogger(__name__)

PROBES = ("vn", "invalid", "h3")
DEFAULT_SNI_LIMIT = 100


class TargetParseError(ValueError):
    def __init__(self, source: str, line: int, message: str):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line


def _parse_address(text: str) -> str:
    return str(ipaddress.ip_address(text.strip().strip("[]")))


def ingest_targets(source: str | Path | Iterable[str], sni_limit: int = DEFAULT_SNI_LIMIT) -> list[Target]:
    """Read ``address[,port[,sni]]`` lines; duplicates collapse, SNI fan-out is capped per address."""
    if isinstance(source, (str, Path)):
        name = str(source)
        lines: Iterable[str] = Path(source).read_text().splitlines()
    else:
        name, lines = "<targets>", source
    out: list[Target] = []
    seen: set[Target] = set()
    per_address: dict[str, int] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) > 3:
            raise TargetParseError(name, n, f"expected address[,port[,sni]], got {line!r}")
        try:
            address = _parse_address(parts[0])
        except ValueError:
            raise TargetParseError(name, n, f"{parts[0]!r} is not an IP address") from None
        try:
            port = int(parts[1]) if len(parts) > 1 and parts[1] else 443
            target = Target(address, port, parts[2] if len(parts) > 2 and parts[2] else None)
        except ValueError as exc:
            raise TargetParseError(name, n, str(exc)) from None
        if target in seen:
            continue
        if target.sni is not None:
            if per_address.get(address, 0) >= sni_limit:
                log.warning("%s:%d: SNI limit %d reached for %s, skipping %s",
                            name, n, sni_limit, address, target.sni)
                continue
            per_address[address] = per_address.get(address, 0) + 1
        seen.add(target)
        out.append(target)
    return out


class Blocklist:
    def __init__(self, prefixes: Iterable[str] = ()):
        self.networks = [ipaddress.ip_network(p.strip(), strict=False) for p in prefixes]

    @classmethod
    def load(cls, path: str | Path) -> "Blocklist":
        entries = []
        for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                ipaddress.ip_network(line, strict=False)
            except ValueError:
                raise TargetParseError(str(path), n, f"{line!r} is not an address prefix") from None
            entries.append(line)
        return cls(entries)

    def __contains__(self, address: str) -> bool:
        ip = ipaddress.ip_address(address)
        return any(ip.version == net.version and ip in net for net in self.networks)

    def __len__(self) -> int:
        return len(self.networks)


class RateLimiter:
    """Shared pacing limiter: a token bucket of depth one.

    Sends are spaced at least ``1 / (headroom * rate)`` apart. A sliding
    window over the last ``floor(rate)`` grants backs this up, so no one
    second holds more than ``rate`` sends even for small fractional rates.
    """

    def __init__(self, rate: float, headroom: float = 0.95, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.interval = 1.0 / (rate * headroom)
        self._next = 0.0
        self._recent: deque[float] = deque(maxlen=max(1, int(rate)))
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep
        self.sends = 0

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            if len(self._recent) == self._recent.maxlen:
                slot = max(slot, self._recent[0] + 1.0 + 1e-9)
            self._recent.append(slot)
            self._next = slot + self.interval
            self.sends += 1
        delay = slot - now
        if delay > 0:
            self._sleep(delay)
        return slot


class LimitedTransport:
    def __init__(self, inner: Transport, limiter: RateLimiter):
        self.inner = inner
        self.limiter = limiter

    def send(self, data: bytes) -> None:
        self.limiter.acquire()
        self.inner.send(data)

    def recv(self, timeout: float) -> bytes | None:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


@dataclass
class ScanJob:
    targets: Sequence[Target]
    probes: frozenset[str] = frozenset(PROBES)
    rate: float = 100.0
    blocklist: Blocklist = field(default_factory=Blocklist)
    out: str | Path | None = None
    db: FingerprintDb | None = None
    config: ProbeConfig = field(default_factory=ProbeConfig)
    rehandshakes: int | None = None
    vn_gating: bool = True
    workers: int = 8
    transport_factory: TransportFactory | None = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        unknown = set(self.probes) - set(PROBES)
        if unknown:
            raise ValueError(f"unknown probes {sorted(unknown)}; choose from {PROBES}")
        self.probes = frozenset(self.probes)
        if self.db is None:
            self.db = load_db()
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ScanRecord:
    target: Target
    status: str
    classification: Classification = field(default_factory=Classification)
    vn: dict | None = None
    observations: list[HandshakeObservation] = field(default_factory=list)
    started: float = 0.0
    finished: float = 0.0
    db_version: str = ""
    error: str | None = None

    @property
    def key(self) -> str:
        return self.target.endpoint

    def to_dict(self) -> dict:
        return {
            "target": self.target.to_dict(),
            "status": self.status,
            "classification": self.classification.to_dict(),
            "vn": self.vn,
            "observations": [o.summary() for o in self.observations],
            "started": self.started,
            "finished": self.finished,
            "duration": round(self.finished - self.started, 6),
            "db_version": self.db_version,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanRecord":
        return cls(Target.from_dict(d["target"]), d["status"],
                   Classification.from_dict(d.get("classification", {})), d.get("vn"),
                   [HandshakeObservation.from_summary(o) for o in d.get("observations", [])],
                   d.get("started", 0.0), d.get("finished", 0.0), d.get("db_version", ""),
                   d.get("error"))

    @classmethod
    def from_json(cls, line: str) -> "ScanRecord":
        return cls.from_dict(json.loads(line))


def read_records(path: str | Path) -> list[ScanRecord]:
    return [ScanRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def scan_target(target: Target, job: ScanJob, factory: TransportFactory) -> ScanRecord:
    """VN gate, then the invalid-ALPN and h3 probes, then rehandshakes if the db asks for them."""
    rec = ScanRecord(target, "ok", started=time.time(), db_version=job.db.version)
    if target.address in job.blocklist:
        rec.status = "skipped-blocklist"
        rec.finished = time.time()
        return rec
    cfg = job.config
    rehandshakes = job.rehandshakes if job.rehandshakes is not None else job.db.rehandshakes
    try:
        if "vn" in job.probes:
            vn = probe_version_negotiation(target, cfg, factory)
            rec.vn = vn.summary()
            if job.vn_gating and vn.outcome is not Outcome.VERSION_NEGOTIATION:
                rec.status = "no-quic"
                rec.finished = time.time()
                return rec
        if "invalid" in job.probes:
            rec.observations.append(probe_handshake(target, [ALPN_INVALID], cfg, factory))
        if "h3" in job.probes:
            rec.observations.append(probe_handshake(target, [ALPN_H3], cfg, factory))
        if rec.observations:
            rec.classification = classify(job.db, rec.observations, rehandshakes)
            if rec.classification.needs_rehandshake:
                extra = probe_disambiguate(target, rehandshakes, cfg, factory)
                rec.observations.extend(extra.observations)
                rec.classification = classify(job.db, rec.observations, rehandshakes)
    except Exception as exc:  # per-target failures are data, not fatal
        log.debug("probe of %s failed", target.endpoint, exc_info=True)
        rec.status = "error"
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.finished = time.time()
    return rec


def run_scan(job: ScanJob, limiter: RateLimiter | None = None) -> Iterator[ScanRecord]:
    """Scan every target; records are yielded (and written) as they complete."""
    limiter = limiter or RateLimiter(job.rate)
    base = job.transport_factory or udp_transport_factory()

    def factory(target: Target) -> Transport:
        return LimitedTransport(base(target), limiter)

    out: IO[str] | None = open(job.out, "w") if job.out is not None else None
    try:
        with ThreadPoolExecutor(max_workers=job.workers, thread_name_prefix="probe") as pool:
            pending = set()
            targets = iter(job.targets)
            exhausted = False
            while True:
                while not exhausted and len(pending) < job.workers * 4:
                    t = next(targets, None)
                    if t is None:
                        exhausted = True
                    else:
                        pending.add(pool.submit(scan_target, t, job, factory))
                if not pending:
                    break
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    rec = fut.result()
                    if out is not None:
                        out.write(rec.to_json() + "\n")
                        out.flush()
                    yield rec
    finally:
        if out is not None:
            out.close()


# -- merging -----------------------------------------------------------------------------

@dataclass
class MergedRecord:
    key: str
    classification: Classification
    merge: str  # both-scans | single | conflict | unidentified
    no_sni: list[Classification] = field(default_factory=list)
    sni: list[Classification] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"key": self.key, "classification": self.classification.to_dict(), "merge": self.merge,
                "no_sni": [c.to_dict() for c in self.no_sni], "sni": [c.to_dict() for c in self.sni]}


def _identified(classes: list[Classification]) -> list[str]:
    libs: list[str] = []
    for c in classes:
        if c.library is not None and c.library not in libs:
            libs.append(c.library)
    return libs


def merge_results(no_sni: Iterable[ScanRecord], sni: Iterable[ScanRecord]) -> list[MergedRecord]:
    """Union per-endpoint classifications of the scan without SNI and the scan(s) with SNI."""
    groups: dict[str, tuple[list[Classification], list[Classification]]] = {}
    for rec in no_sni:
        groups.setdefault(rec.key, ([], []))[0].append(rec.classification)
    for rec in sni:
        groups.setdefault(rec.key, ([], []))[1].append(rec.classification)
    merged = []
    for key, (a, b) in groups.items():
        la, lb = _identified(a), _identified(b)
        libs = sorted(set(la) | set(lb))
        if la and lb and len(libs) == 1:
            cls = Classification(libs[0], Method.BOTH_SCANS,
                                 error_candidates=sorted({x for c in a + b for x in c.error_candidates}),
                                 tp_candidates=sorted({x for c in a + b for x in c.tp_candidates}))
            status = "both-scans"
        elif len(libs) > 1:
            cls = Classification(None, Method.NONE, libs, conflict=True)
            status = "conflict"
        elif libs:
            cls = next(c for c in a + b if c.library is not None)
            status = "single"
        else:
            cls = (a + b)[0]
            status = "unidentified"
        merged.append(MergedRecord(key, cls, status, list(a), list(b)))
    return merged
