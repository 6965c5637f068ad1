"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""
import random
import socket
import time
from contextlib import contextmanager

import pytest

import test_pktcrypto as kat
import test_wire as codec
from quicfp import cli
from quicfp.capture import Capture
from quicfp.fingerprint import Classification, Method, classify, collisions, load_db, match_error
from quicfp.labharness import (
    SCRIPTS,
    Farm,
    LocalLab,
    LocalTransport,
    ServerSession,
    max_in_window,
    mutate_tp_values,
    replay_flight,
    script,
)
from quicfp.probe import (
    ALPN_H3,
    ALPN_INVALID,
    ErrorObservation,
    ProbeConfig,
    Target,
    extract_observation,
    probe_disambiguate,
    probe_handshake,
)
from quicfp.scanner import ScanJob, ScanRecord, merge_results, run_scan

pytestmark = pytest.mark.acceptance

GENERIC = {"msquic", "quic-go", "picoquic", "haproxy", "ngtcp2", "quiche"}
HAPROXY_ORDER = [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8]


@contextmanager
def criterion(capsys, number, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        msg = detail.get("text") or f"{type(exc).__name__}: {exc}"
        with capsys.disabled():
            print(f"\n[FAIL] criterion {number} ({title}): {msg}")
        raise
    with capsys.disabled():
        print(f"\n[PASS] criterion {number} ({title}): {detail.get('text', '')}")


@pytest.fixture(scope="module")
def farm_scan():
    """One rate-100 scan of the loopback farm, shared by criteria 1 and 8."""
    db = load_db()
    with Farm(seed=21) as farm:
        job = ScanJob(farm.targets(), rate=100, db=db, config=ProbeConfig(response_timeout=1.0))
        t0 = time.monotonic()
        records = list(run_scan(job))
        elapsed = time.monotonic() - t0
        expected = {farm.endpoints[s.library][1]: s.library for s in SCRIPTS}
        yield records, elapsed, farm.arrival_times(), expected


def test_criterion_1_table_fidelity(capsys, farm_scan):
    with criterion(capsys, 1, "fingerprint-table fidelity") as d:
        records, elapsed, _, expected = farm_scan
        got = {expected[r.target.port]: r.classification.library for r in records}
        wrong = {lib: found for lib, found in got.items() if found != lib}
        kwik = next(r for r in records if expected[r.target.port] == "kwik").classification
        d["text"] = (f"{len(got) - len(wrong)}/{len(expected)} correct, kwik via {kwik.method.value}, "
                     f"{elapsed:.1f}s; wrong={wrong}")
        assert len(records) == len(expected) and not wrong
        assert kwik.method is Method.ERROR
        assert elapsed < 60


def test_criterion_2_error_uniqueness(capsys, db):
    with criterion(capsys, 2, "error-message uniqueness") as d:
        lab = LocalLab(seed=0)
        cfg = ProbeConfig(response_timeout=0.05)
        unique, generic_hits = set(), set()
        for s in SCRIPTS:
            obs = probe_handshake(lab.target(s.library), [ALPN_INVALID], cfg, lab)
            for err in obs.errors():
                libs = match_error(db, err)
                if len(libs) == 1:
                    assert libs == [s.library]
                    unique.add(libs[0])
                if err.code == 0x178 and err.reason == "" and not err.frame_type:
                    assert set(libs) == GENERIC
                    generic_hits.add(s.library)
        group = set(match_error(db, ErrorObservation(0x178, 0, "")))
        d["text"] = f"{len(unique)} unique ({', '.join(sorted(unique))}); generic group size {len(group)}"
        assert len(unique) == 10
        assert group == GENERIC and generic_hits == GENERIC


class _ForcedFirst(random.Random):
    """Seeded session rng whose single shuffle yields a chosen permutation."""

    order: list[int] = []

    def shuffle(self, x):
        assert sorted(x) == sorted(self.order)
        x[:] = self.order


class _CollisionLab(LocalLab):
    """akaquic endpoint whose first session emits haproxy's fixed order."""

    def __init__(self, seed):
        super().__init__(seed=seed)
        self.forced = False

    def transport(self, target):
        if self.forced:
            return super().transport(target)
        self.forced = True
        rng = _ForcedFirst(self.seed)
        rng.order = HAPROXY_ORDER
        t = LocalTransport(ServerSession(script(self.library_at(target.port)), rng))
        self.transports.append(t)
        return t

    __call__ = transport


def test_criterion_3_collision_handling(capsys, db):
    with criterion(capsys, 3, "collision handling") as d:
        cfg = ProbeConfig(response_timeout=0.05)
        as_haproxy = as_akaquic = flagged = 0
        for seed in range(1000):
            lab = _CollisionLab(seed)
            target = lab.target("akaquic")
            first = probe_handshake(target, [ALPN_H3], cfg, lab)
            assert first.tp_order == HAPROXY_ORDER
            cls = classify(db, [first], rehandshakes=2)
            if cls.needs_rehandshake:
                flagged += 1
                extra = probe_disambiguate(target, 2, cfg, lab)
                cls = classify(db, [first, *extra.observations], rehandshakes=2)
            as_haproxy += cls.library == "haproxy"
            as_akaquic += cls.library == "akaquic"
        pairs = collisions(db)
        d["text"] = (f"pairs={pairs}; 1000 trials: {flagged} flagged for rehandshake, "
                     f"{as_haproxy} as haproxy, {as_akaquic} as akaquic")
        assert as_haproxy == 0
        assert sorted(pairs) == [("haproxy", "akaquic"), ("quinn", "gquiche")]


def test_criterion_4_crypto_known_answers(capsys):
    with criterion(capsys, 4, "crypto known answers") as d:
        checks = [kat.test_initial_secrets_match_rfc_and_oracle, kat.test_initial_keys_known_answer,
                  kat.test_protect_client_initial_known_answer, kat.test_unprotect_client_initial_known_answer,
                  kat.test_protect_server_initial_known_answer, kat.test_server_initial_decrypts_to_server_hello,
                  kat.test_x25519_rfc7748_vector]
        for check in checks:
            check()
        d["text"] = f"{len(checks)} vector checks byte-exact (A.1 secrets and keys, A.2, A.3, RFC 7748)"


def test_criterion_5_codec_properties(capsys):
    with criterion(capsys, 5, "codec property suites") as d:
        suites = [codec.test_varint_roundtrip_and_oracle, codec.test_long_header_roundtrip,
                  codec.test_frame_roundtrip]
        for suite in suites:
            suite()
        d["text"] = "varint, long header and frame round trips: 1000 cases each, 0 failures"


def test_criterion_6_value_insensitivity(capsys, db, golden_dir):
    with criterion(capsys, 6, "value insensitivity") as d:
        h3 = Capture.load(golden_dir / "quiche" / "h3.qfcap")
        invalid = replay_flight(golden_dir / "quiche" / "invalid.qfcap")
        reference = classify(db, [invalid, extract_observation(h3)])
        results = []
        for seed in range(20):
            mutated = mutate_tp_values(h3, seed=seed)
            assert mutated.inbound() != h3.inbound()
            results.append(classify(db, [invalid, extract_observation(mutated)]))
        same = sum(r == reference for r in results)
        d["text"] = f"{same}/{len(results)} mutated flights classify as {reference.library} ({reference.method.value})"
        assert reference.library == "quiche" and same == len(results)


def test_criterion_7_merge_semantics(capsys):
    with criterion(capsys, 7, "merge semantics") as d:
        def rec(lib, sni=None):
            cls = Classification(lib, Method.BOTH) if lib else Classification()
            return ScanRecord(Target("192.0.2.7", 443, sni), "ok", cls)

        (a,) = merge_results([rec(None)], [rec("s2n-quic", "a.example")])
        (b,) = merge_results([rec("quiche")], [rec("quiche", "a.example")])
        (c,) = merge_results([rec("lsquic")], [rec("nginx", "a.example")])
        (e,) = merge_results([rec("quinn")], [])
        d["text"] = (f"timeout+id -> {a.classification.library}/{a.merge}; agree -> {b.merge}; "
                     f"disagree -> {c.merge}; with empty -> {e.classification.library}/{e.merge}")
        assert a.classification.library == "s2n-quic"
        assert b.classification.library == "quiche" and b.merge == "both-scans"
        assert c.merge == "conflict" and c.classification.conflict and c.classification.library is None
        assert e.classification == rec("quinn").classification and e.merge == "single"


def test_criterion_8_rate_cap(capsys, farm_scan):
    with criterion(capsys, 8, "rate cap") as d:
        _, elapsed, arrivals, _ = farm_scan
        peak = max_in_window(arrivals, 1.0)
        d["text"] = f"{len(arrivals)} datagrams over {elapsed:.1f}s, peak {peak} in any 1 s window (cap 100)"
        assert arrivals and peak <= 100


def test_criterion_9_offline_replay(capsys, golden_dir, monkeypatch):
    with criterion(capsys, 9, "offline replay") as d:
        def no_network(*a, **k):
            raise AssertionError("network access during offline classification")

        monkeypatch.setattr(socket, "socket", no_network)
        code = cli.main(["classify", "--flights", str(golden_dir)])
        out = capsys.readouterr().out
        rows = [line.split("\t") for line in out.strip().splitlines()]
        wrong = [r for r in rows if r[0] != r[1]]
        d["text"] = f"{len(rows) - len(wrong)}/{len(SCRIPTS)} golden targets reproduce; wrong={wrong}"
        assert code == 0 and len(rows) == len(SCRIPTS) and not wrong
