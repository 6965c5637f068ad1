import json

import pytest
from hypothesis import given, strategies as st

from quicfp.fingerprint import (
    Classification,
    DbError,
    Method,
    classify,
    collisions,
    is_grease_tp,
    lint,
    load_db,
    match_error,
    match_tp,
    normalize_tp_order,
    unique_error_libraries,
)
from quicfp.labharness import SCRIPTS, LocalLab
from quicfp.probe import (
    ALPN_H3,
    ALPN_INVALID,
    ErrorObservation,
    HandshakeObservation,
    Outcome,
    ProbeConfig,
    probe_handshake,
)

GENERIC = ["msquic", "quic-go", "picoquic", "haproxy", "ngtcp2", "quiche"]


def _h3(sig, order):
    return HandshakeObservation(Outcome.HANDSHAKE_PROGRESSED, ["h3"], ext_signature=sig, tp_order=list(order))


def _closed(code, reason, frame_type=0):
    return HandshakeObservation(Outcome.CLOSED, ["invalid"], error=ErrorObservation(code, frame_type, reason))


# -- loading --------------------------------------------------------------------------

def test_bundled_db_counts(db):
    assert len(db.error_rules) == 20
    assert "kwik" in {r.library for r in db.error_rules}
    assert len({r.library for r in db.tp_rules}) == 19
    # nginx and s2n-quic each appear under both ServerHello orders
    assert len(db.tp_rows) == 21
    dual = {lib for lib, *_ in db.tp_rows if sum(1 for r in db.tp_rows if r[0] == lib) == 2}
    assert dual == {"s2n-quic", "nginx"}


def test_bundled_db_lints_clean(db):
    assert lint(db) == []


def test_db_roundtrip(db):
    again = load_db(json.dumps(db.to_dict()))
    assert again.tp_rows == db.tp_rows
    assert [r.library for r in again.error_rules] == [r.library for r in db.error_rules]


def test_duplicate_fixed_rows_rejected(db):
    d = db.to_dict()
    d["tp_rows"].append(dict(d["tp_rows"][0], library="copycat"))
    with pytest.raises(DbError, match="duplicate"):
        load_db(d)


def test_db_without_tp_rows_is_error_only(db):
    d = db.to_dict()
    del d["tp_rows"]
    small = load_db(d)
    assert small.tp_rules == ()
    cls = classify(small, [_closed(0x178, "no supported application protocols"),
                           _h3("51-43", [0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xF])])
    assert (cls.library, cls.method) == ("haskell-quic", Method.ERROR)


@pytest.mark.parametrize("mutate", [
    lambda d: d["tp_rows"][0].update(kind="sorted"),
    lambda d: d["tp_rows"][0].update(ids=[]),
    lambda d: d["tp_rows"][0].update(ext="43-44"),
    lambda d: d["error_rules"][0].update(flags=["bogus"]),
    lambda d: d["error_rules"][0].pop("library"),
])
def test_schema_violations(db, mutate):
    d = json.loads(json.dumps(db.to_dict()))
    mutate(d)
    with pytest.raises(DbError):
        load_db(d)


def test_malformed_text():
    with pytest.raises(DbError):
        load_db("{not json")


# -- normalization --------------------------------------------------------------------

def test_normalize_lsquic_row():
    raw = [(i, b"v") for i in (0x4, 0x6, 0x7, 0x8, 0x0, 0xF, 0x2)]
    assert normalize_tp_order(raw) == [0x4, 0x6, 0x7, 0x8, 0x0, 0xF, 0x2]


def test_normalize_drops_grease():
    assert 27 not in normalize_tp_order([(0x4, b""), (27, b"x"), (0x6, b"")])
    assert normalize_tp_order([]) == []


@given(st.lists(st.tuples(st.integers(0, 2**62 - 1), st.binary(max_size=4)), max_size=30))
def test_normalize_property(raw):
    out = normalize_tp_order(raw)
    assert out == [i for i, _ in raw if (i - 27) % 31 != 0 or i < 27]
    assert not any(is_grease_tp(i) for i in out)


def test_grease_pattern():
    assert [i for i in range(200) if is_grease_tp(i)] == [27, 58, 89, 120, 151, 182]


# -- matching -------------------------------------------------------------------------

@pytest.mark.parametrize("code,reason,expected", [
    (0x178, "no supported application protocols", ["haskell-quic"]),
    (0x150, "TLS alert 80", ["lsquic"]),
    (0x178, "no suitable application protocol", ["lsquic"]),
    (0x178, "", GENERIC),
    (0x178, "unsupported application protocol: invalid", ["kwik"]),
    (0x128, "No common ALPN protocols", ["aioquic"]),
    (0x178, "something else entirely", []),
])
def test_match_error_examples(db, code, reason, expected):
    assert match_error(db, ErrorObservation(code, 0, reason)) == expected


def test_match_error_flag(db):
    assert match_error(db, None, ["alpn_missing_in_ee"]) == ["xquic"]
    assert match_error(db, None) == []


def test_wildcard_slots(db):
    mvfst = ("fizz::FizzException: Unable to negotiate ALPN, as required by policy. "
             "policy=AlpnMode::Optional")
    assert match_error(db, ErrorObservation(0x178, 0x1C, mvfst)) == ["mvfst"]
    aka = ErrorObservation(0x0A, 0, "PROTOCOL_VIOLATION: 31:No known ALPN provided by client")
    assert match_error(db, aka) == ["akaquic"]
    gq = ErrorObservation(0x178, 6, "41:TLS handshake failure (ENCRYPTION_INITIAL) 120: no application protocol")
    assert match_error(db, gq) == ["gquiche"]
    # anchored: a prefix alone is not enough
    assert match_error(db, ErrorObservation(0x178, 0, "handshake failed!")) == []


@pytest.mark.parametrize("sig,order,fixed,rand", [
    ("43-51", [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8], ["haproxy"], ["akaquic"]),
    ("51-43", [0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xF], ["haskell-quic"], []),
    ("43-51", [0x4, 0x6, 0x7, 0x8, 0x0, 0xF], ["s2n-quic"], []),
    ("43-51", [0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xF], ["xquic"], []),
    ("43-51", [0x8, 0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0xF], [], ["akaquic"]),
])
def test_match_tp_examples(db, sig, order, fixed, rand):
    assert match_tp(db, sig, order) == (fixed, rand)


def test_collisions_enumerated(db):
    pairs = collisions(db)
    assert ("haproxy", "akaquic") in pairs and ("quinn", "gquiche") in pairs
    # the bundled tables also produce s2n-quic's 51-43 row against neqo's set
    assert set(pairs) - {("haproxy", "akaquic"), ("quinn", "gquiche")} == {("s2n-quic", "neqo")}


def test_unique_error_libraries(db):
    assert unique_error_libraries(db) == {"aioquic", "akaquic", "gquiche", "haskell-quic", "kwik",
                                          "lsquic", "mvfst", "nginx", "quant", "quinn"}


# -- classification -------------------------------------------------------------------

def test_classify_both(db):
    cls = classify(db, [_closed(0x178, "no suitable application protocol"),
                        _h3("51-43", [0x4, 0x6, 0x7, 0x8, 0x0, 0xF, 0x2])])
    assert (cls.library, cls.method) == ("lsquic", Method.BOTH)


def test_classify_collision_needs_rehandshake(db):
    order = [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8]
    cls = classify(db, [_h3("43-51", order)])
    assert cls.library is None and cls.needs_rehandshake
    assert set(cls.ambiguous_with) == {"haproxy", "akaquic"}


def test_classify_consistent_rehandshakes_fixed(db):
    order = [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8]
    cls = classify(db, [_h3("43-51", order)] * 3)
    assert (cls.library, cls.method) == ("haproxy", Method.TRANSPORT_PARAMS)


def test_classify_generic_error_resolves_collision(db):
    order = [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8]
    cls = classify(db, [_closed(0x178, ""), _h3("43-51", order)])
    assert (cls.library, cls.method) == ("haproxy", Method.BOTH)


def test_classify_differing_orders_randomized(db):
    a = [0x3, 0x4, 0x6, 0x7, 0x8, 0x2, 0x0, 0xF]
    b = [0xF, 0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8]
    cls = classify(db, [_h3("51-43", a), _h3("51-43", a), _h3("51-43", b)])
    assert (cls.library, cls.method) == ("gquiche", Method.TRANSPORT_PARAMS)


def test_classify_conflict_reported(db):
    cls = classify(db, [_closed(0x178, "no supported application protocols"),
                        _h3("51-43", [0x4, 0x6, 0x7, 0x8, 0x0, 0xF, 0x2])])
    assert cls.library is None and cls.conflict
    assert set(cls.ambiguous_with) == {"haskell-quic", "lsquic"}


def test_classify_flag(db):
    obs = HandshakeObservation(Outcome.HANDSHAKE_PROGRESSED, ["invalid"], alpn_missing_in_ee=True)
    assert classify(db, [obs]).library == "xquic"


def test_classify_nothing(db):
    cls = classify(db, [HandshakeObservation(Outcome.TIMEOUT)])
    assert cls == Classification()
    with pytest.raises(ValueError):
        classify(db, [])


def test_classification_invariant():
    with pytest.raises(ValueError):
        Classification("x", Method.ERROR, ["y"])
    c = Classification("x", Method.BOTH, error_candidates=["x"])
    assert Classification.from_dict(c.to_dict()) == c


@given(st.lists(st.sampled_from([
    _closed(0x178, ""), _closed(0x150, "TLS alert 80"),
    _h3("43-51", [0x0, 0x2, 0xF, 0x3, 0x4, 0x6, 0x7, 0x8]),
    _h3("43-51", [0x8, 0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0xF]),
    _h3("51-43", [0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xF]),
    HandshakeObservation(Outcome.TIMEOUT),
]), min_size=1, max_size=5))
def test_classify_is_pure(obs):
    db = load_db()
    assert classify(db, obs) == classify(db, list(obs))


@pytest.mark.parametrize("library", [s.library for s in SCRIPTS])
def test_completeness_over_lab(db, library):
    lab = LocalLab(seed=5)
    cfg = ProbeConfig(response_timeout=0.05)
    target = lab.target(library)
    obs = [probe_handshake(target, [ALPN_INVALID], cfg, lab), probe_handshake(target, [ALPN_H3], cfg, lab)]
    cls = classify(db, obs)
    if cls.needs_rehandshake:
        obs += [probe_handshake(target, [ALPN_H3], cfg, lab) for _ in range(db.rehandshakes)]
        cls = classify(db, obs)
    assert cls.library == library, cls
    if library == "kwik":
        assert cls.method is Method.ERROR


@pytest.mark.parametrize("rule_index", range(20))
def test_every_error_rule_matches_own_flight(db, rule_index):
    rule = db.error_rules[rule_index]
    lab = LocalLab(seed=9)
    cfg = ProbeConfig(response_timeout=0.05)
    target = lab.target(rule.library, sni=None if rule.reason_pattern == "TLS alert 80" else "lab.example")
    obs = probe_handshake(target, [ALPN_INVALID], cfg, lab)
    if rule.flag_only:
        assert obs.alpn_missing_in_ee
    else:
        assert any(rule.matches(e) for e in obs.errors()), (rule, obs.errors())
