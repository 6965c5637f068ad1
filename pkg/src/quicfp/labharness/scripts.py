"""Per-library flight scripts for the lab endpoints."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..tlsmini import EXT_SIG_KS_FIRST as KS, EXT_SIG_SV_FIRST as SV
from ..wire import QUIC_V1


@dataclass(frozen=True)
class FixedOrder:
    ids: tuple[int, ...]


@dataclass(frozen=True)
class RandomizedSet:
    ids: frozenset[int]


@dataclass(frozen=True)
class CloseWithReason:
    code: int
    reason_template: str
    frame_type: int = 0
    # further closes coalesced into the same datagram, as (code, reason)
    extra: tuple[tuple[int, str], ...] = ()


@dataclass(frozen=True)
class CloseNoReason:
    code: int
    frame_type: int = 0


@dataclass(frozen=True)
class ContinueWithoutAlpnExt:
    pass


@dataclass(frozen=True)
class Silent:
    pass


AlpnFailure = CloseWithReason | CloseNoReason | ContinueWithoutAlpnExt | Silent


@dataclass(frozen=True)
class SniPolicy:
    kind: str = "ignore"  # ignore | require | default_cert
    names: frozenset[str] = frozenset()
    on_failure: AlpnFailure = Silent()

    def accepts(self, sni: str | None) -> bool:
        if self.kind != "require":
            return True
        if sni is None:
            return False
        return not self.names or sni in self.names


@dataclass(frozen=True)
class FlightScript:
    library: str
    ext_signatures: tuple[str, ...]
    tp_behavior: FixedOrder | RandomizedSet
    alpn_failure: AlpnFailure
    sni_policy: SniPolicy = SniPolicy()
    retry: bool = False
    # coalesced: SH and EE in one datagram; split: separate datagrams, EE in
    # two out-of-order packets; ack_gated: EE only after the client ACKs SH
    flight_mode: str = "coalesced"
    versions: tuple[int, ...] = (QUIC_V1,)
    grease_tp: int | None = None
    supported_alpn: tuple[str, ...] = ("h3",)

    def __post_init__(self):
        if not self.ext_signatures or not set(self.ext_signatures) <= {SV, KS}:
            raise ValueError(f"{self.library}: bad ext signatures {self.ext_signatures}")
        if self.flight_mode not in ("coalesced", "split", "ack_gated"):
            raise ValueError(f"{self.library}: unknown flight mode {self.flight_mode!r}")
        if not self.tp_behavior.ids:
            raise ValueError(f"{self.library}: empty transport-parameter behavior")

    @property
    def randomized(self) -> bool:
        return isinstance(self.tp_behavior, RandomizedSet)


def _f(*ids: int) -> FixedOrder:
    return FixedOrder(tuple(ids))


def _s(*ids: int) -> RandomizedSet:
    return RandomizedSet(frozenset(ids))


LAB_SNI = "lab.example"

SCRIPTS: tuple[FlightScript, ...] = (
    FlightScript("s2n-quic", (SV, KS), _f(0x4, 0x6, 0x7, 0x8, 0x0, 0xf), Silent(),
                 SniPolicy("require", frozenset({LAB_SNI}), Silent())),
    FlightScript("lsquic", (KS,), _f(0x4, 0x6, 0x7, 0x8, 0x0, 0xf, 0x2),
                 CloseWithReason(0x178, "no suitable application protocol"),
                 SniPolicy("require", frozenset({LAB_SNI}), CloseWithReason(0x150, "TLS alert 80"))),
    FlightScript("ngtcp2", (SV,), _f(0x0, 0x2, 0xf, 0x6, 0x7, 0x4, 0x8), CloseNoReason(0x178)),
    FlightScript("xquic", (SV,), _f(0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf), ContinueWithoutAlpnExt()),
    FlightScript("haskell-quic", (KS,), _f(0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf),
                 CloseWithReason(0x178, "no supported application protocols"), flight_mode="split"),
    FlightScript("haproxy", (SV,), _f(0x0, 0x2, 0xf, 0x3, 0x4, 0x6, 0x7, 0x8), CloseNoReason(0x178)),
    FlightScript("quinn", (KS,), _f(0x3, 0x4, 0x6, 0x7, 0x8, 0x2, 0x0, 0xf),
                 CloseWithReason(0x178, "peer doesn't support any known protocol")),
    FlightScript("quic-go", (SV,), _f(0x6, 0x7, 0x4, 0x8, 0x3, 0xb, 0x2, 0x0, 0xf),
                 CloseNoReason(0x178), retry=True, versions=(0x6B3343CF, QUIC_V1)),
    FlightScript("picoquic", (SV,), _f(0x4, 0x8, 0x3, 0x6, 0x7, 0xb, 0xf, 0x0, 0x2),
                 CloseNoReason(0x178), grease_tp=27 + 31 * 5),
    FlightScript("quicly", (SV,), _f(0x3, 0x6, 0x7, 0x4, 0x0, 0xf, 0x2, 0x8, 0xa), Silent()),
    FlightScript("mvfst", (SV,), _f(0x0, 0x6, 0x7, 0x4, 0x8, 0xa, 0x3, 0x2, 0xf),
                 CloseWithReason(0x178, "fizz::FizzException: Unable to negotiate ALPN, as required "
                                        "by policy. policy=AlpnMode::Required", frame_type=0x1C),
                 flight_mode="ack_gated"),
    FlightScript("quiche", (KS,), _f(0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf), CloseNoReason(0x178)),
    FlightScript("aioquic", (SV,), _f(0x0, 0x2, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf),
                 CloseWithReason(0x128, "No common ALPN protocols", frame_type=0x6)),
    FlightScript("nginx", (KS, SV), _f(0x4, 0x8, 0x6, 0x7, 0x3, 0xb, 0xa, 0x0, 0xf, 0x2),
                 CloseWithReason(0x178, "handshake failed"), retry=True),
    FlightScript("msquic", (SV,), _f(0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf),
                 CloseNoReason(0x178), flight_mode="split"),
    FlightScript("gquiche", (KS,), _s(0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf),
                 CloseWithReason(0x178, "28:TLS handshake failure (ENCRYPTION_INITIAL) 120: "
                                        "no application protocol", frame_type=0x6)),
    FlightScript("akaquic", (SV,), _s(0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf),
                 CloseWithReason(0x150, "200:TLS handshake failure (ENCRYPTION_INITIAL) 80: internal error",
                                 extra=((0x0A, "PROTOCOL_VIOLATION: 28:No known ALPN provided by client"),))),
    FlightScript("quant", (SV,), _s(0x0, 0x2, 0x3, 0x4, 0x6, 0x8, 0xf),
                 CloseWithReason(0x178, "PTLS error 120 (NO_APPLICATION_PROTOCOL)", frame_type=0x6)),
    FlightScript("neqo", (KS,), _s(0x0, 0x6, 0x4, 0xf, 0x8, 0x7), CloseNoReason(0x178, frame_type=0x6),
                 flight_mode="split"),
    # no published order; identifiable by its error message only
    FlightScript("kwik", (SV,), _f(0xf, 0x0, 0x1, 0x3, 0x4, 0x5, 0x6, 0x7, 0x8, 0x9, 0xe),
                 CloseWithReason(0x178, "unsupported application protocol: {alpn}")),
)

SCRIPTS_BY_LIBRARY = {s.library: s for s in SCRIPTS}


def script(library: str) -> FlightScript:
    try:
        return SCRIPTS_BY_LIBRARY[library]
    except KeyError:
        raise KeyError(f"no lab script for {library!r}") from None


def check_db_fidelity(db, scripts=SCRIPTS) -> list[str]:
    """Cross-check scripts against a fingerprint db; returns mismatch messages."""
    from ..fingerprint import FIXED

    problems = []
    rows = {(lib, sig): (kind, ids) for lib, sig, kind, ids in db.tp_rows}
    by_lib = {s.library: s for s in scripts}
    for (lib, sig), (kind, ids) in rows.items():
        s = by_lib.get(lib)
        if s is None:
            problems.append(f"db row {lib} {sig} has no script")
            continue
        if sig not in s.ext_signatures:
            problems.append(f"{lib}: script lacks ext signature {sig}")
        if kind == FIXED and s.tp_behavior != FixedOrder(ids):
            problems.append(f"{lib}: script order differs from db row")
        if kind != FIXED and s.tp_behavior != RandomizedSet(frozenset(ids)):
            problems.append(f"{lib}: script set differs from db row")
    for s in scripts:
        for sig in s.ext_signatures:
            if (s.library, sig) not in rows and any(l == s.library for l, _ in rows):
                problems.append(f"{s.library}: script signature {sig} not in db")
    for rule in db.error_rules:
        if rule.library not in by_lib:
            problems.append(f"error rule for {rule.library} has no script")
    return problems
