"""Loopback endpoint farm and an in-process transport over the same sessions."""
from __future__ import annotations

import json
import logging
import random
import selectors
import socket
import threading
import time
from collections import deque
from pathlib import Path
from typing import Iterable, Mapping

from ..probe import Target
from .endpoint import ServerSession
from .scripts import LAB_SNI, SCRIPTS, FlightScript

log = logging.getLogger(__name__)


class ScriptRandom:
    """Per-script seeded source; each session draws its own child generator."""

    def __init__(self, seed: int, library: str):
        self._parent = random.Random(f"{seed}:{library}")
        self._lock = threading.Lock()

    def session_rng(self) -> random.Random:
        with self._lock:
            return random.Random(self._parent.getrandbits(64))


class Farm:
    """Scripts bound to loopback UDP ports, served by one selector thread."""

    def __init__(self, scripts: Iterable[FlightScript] = SCRIPTS, seed: int = 0,
                 host: str = "127.0.0.1", ports: Mapping[str, int] | None = None):
        self.scripts = list(scripts)
        self.seed = seed
        self.host = host
        self._ports = dict(ports or {})
        self.endpoints: dict[str, tuple[str, int]] = {}
        self.arrivals: list[tuple[float, str]] = []
        self.sessions: dict[tuple[str, tuple], ServerSession] = {}
        self._rand = {s.library: ScriptRandom(seed, s.library) for s in self.scripts}
        self._by_lib = {s.library: s for s in self.scripts}
        self._sel: selectors.BaseSelector | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()

    def start(self) -> "Farm":
        self._sel = selectors.DefaultSelector()
        family = socket.AF_INET6 if ":" in self.host else socket.AF_INET
        for s in self.scripts:
            sock = socket.socket(family, socket.SOCK_DGRAM)
            try:
                sock.bind((self.host, self._ports.get(s.library, 0)))
            except OSError:
                sock.close()
                self.stop()
                raise
            sock.setblocking(False)
            self._sel.register(sock, selectors.EVENT_READ, s.library)
            self.endpoints[s.library] = sock.getsockname()[:2]
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="lab-farm", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            for key, _ in self._sel.select(0.05):
                library = key.data
                try:
                    data, addr = key.fileobj.recvfrom(65535)
                except (BlockingIOError, ConnectionError):
                    continue
                with self._lock:
                    self.arrivals.append((time.monotonic(), library))
                    session = self.sessions.get((library, addr))
                    if session is None:
                        session = ServerSession(self._by_lib[library], self._rand[library].session_rng())
                        self.sessions[(library, addr)] = session
                try:
                    replies = session.handle(data)
                except Exception:  # a scripted endpoint must never take the farm down
                    log.exception("%s endpoint failed on a datagram", library)
                    continue
                for reply in replies:
                    try:
                        key.fileobj.sendto(reply, addr)
                    except OSError as exc:
                        log.debug("reply to %s failed: %s", addr, exc)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
            self._thread = None
        if self._sel is not None:
            for key in list(self._sel.get_map().values()):
                key.fileobj.close()
            self._sel.close()
            self._sel = None

    def __enter__(self) -> "Farm":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def target(self, library: str, sni: str | None = LAB_SNI) -> Target:
        host, port = self.endpoints[library]
        return Target(host, port, sni)

    def targets(self, sni: str | None = LAB_SNI) -> list[Target]:
        return [self.target(s.library, sni) for s in self.scripts]

    def library_at(self, port: int) -> str:
        for lib, (_, p) in self.endpoints.items():
            if p == port:
                return lib
        raise KeyError(port)

    def arrival_times(self) -> list[float]:
        with self._lock:
            return [t for t, _ in self.arrivals]

    def manifest(self) -> dict:
        return {"host": self.host, "seed": self.seed,
                "endpoints": [{"port": p, "library": lib} for lib, (_, p) in self.endpoints.items()]}

    def save_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(), indent=2) + "\n")
        return path


def serve(farm: Farm) -> Farm:
    return farm.start()


def load_manifest(path: str | Path) -> tuple[str, dict[int, str]]:
    data = json.loads(Path(path).read_text())
    return data["host"], {int(e["port"]): e["library"] for e in data["endpoints"]}


def max_in_window(times: Iterable[float], window: float = 1.0) -> int:
    """Largest number of events inside any half-open interval of length ``window``."""
    ts = sorted(times)
    best, lo = 0, 0
    for hi, t in enumerate(ts):
        while ts[lo] <= t - window:
            lo += 1
        best = max(best, hi - lo + 1)
    return best


class LocalTransport:
    """In-process transport: datagrams go straight into a ServerSession."""

    def __init__(self, session: ServerSession):
        self.session = session
        self.queue: deque[bytes] = deque()
        self.sent = 0

    def send(self, data: bytes) -> None:
        self.sent += 1
        self.queue.extend(self.session.handle(data))

    def recv(self, timeout: float) -> bytes | None:
        return self.queue.popleft() if self.queue else None

    def close(self) -> None:
        pass


class LocalLab:
    """Farm stand-in without sockets; targets use 127.0.0.1 with synthetic ports."""

    BASE_PORT = 40000

    def __init__(self, scripts: Iterable[FlightScript] = SCRIPTS, seed: int = 0):
        self.scripts = list(scripts)
        self.seed = seed
        self._rand = {s.library: ScriptRandom(seed, s.library) for s in self.scripts}
        self.ports = {s.library: self.BASE_PORT + n for n, s in enumerate(self.scripts)}
        self._by_port = {p: lib for lib, p in self.ports.items()}
        self._by_lib = {s.library: s for s in self.scripts}
        self.transports: list[LocalTransport] = []

    def target(self, library: str, sni: str | None = LAB_SNI) -> Target:
        return Target("127.0.0.1", self.ports[library], sni)

    def targets(self, sni: str | None = LAB_SNI) -> list[Target]:
        return [self.target(s.library, sni) for s in self.scripts]

    def library_at(self, port: int) -> str:
        return self._by_port[port]

    def transport(self, target: Target) -> LocalTransport:
        lib = self._by_port[target.port]
        t = LocalTransport(ServerSession(self._by_lib[lib], self._rand[lib].session_rng()))
        self.transports.append(t)
        return t

    __call__ = transport
