"""Library classification from error observations and transport-parameter order."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .probe import ErrorObservation, HandshakeObservation
from .tlsmini import EXT_SIG_KS_FIRST, EXT_SIG_SV_FIRST

SIGNATURES = frozenset({EXT_SIG_SV_FIRST, EXT_SIG_KS_FIRST})
FLAG_NO_REASON = "no_reason_with_code"
FLAG_ALPN_MISSING = "alpn_missing_in_ee"
FLAGS = frozenset({FLAG_NO_REASON, FLAG_ALPN_MISSING})
FIXED, RANDOMIZED = "fixed", "set"


class DbError(ValueError):
    pass


class Method(str, enum.Enum):
    ERROR = "error"
    TRANSPORT_PARAMS = "transport_params"
    BOTH = "both"
    NONE = "none"
    BOTH_SCANS = "both-scans"


def is_grease_tp(tp_id: int) -> bool:
    return tp_id >= 27 and (tp_id - 27) % 31 == 0


def normalize_tp_order(raw: Iterable) -> list[int]:
    """Drop values and GREASE ids; keep wire order."""
    ids = [item[0] if isinstance(item, (tuple, list)) else item for item in raw]
    return [i for i in ids if not is_grease_tp(i)]


def _glob(pattern: str) -> re.Pattern:
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")), re.DOTALL)


@dataclass(frozen=True)
class ErrorRule:
    library: str
    code: int | None = None          # None matches any code
    reason_pattern: str | None = None  # None matches any reason; "" only an absent one
    frame_type: int | None = None
    behavior_flags: frozenset[str] = frozenset()

    def __post_init__(self):
        unknown = self.behavior_flags - FLAGS
        if unknown:
            raise DbError(f"{self.library}: unknown behavior flags {sorted(unknown)}")
        if self.code is None and self.reason_pattern is None and not self.behavior_flags:
            raise DbError(f"{self.library}: error rule matches everything")
        object.__setattr__(self, "_re", None if self.reason_pattern is None
                           else _glob(self.reason_pattern))

    @property
    def flag_only(self) -> bool:
        return FLAG_ALPN_MISSING in self.behavior_flags

    def matches(self, obs: ErrorObservation) -> bool:
        if self.flag_only:
            return False
        if self.code is not None and obs.code != self.code:
            return False
        if self.frame_type is not None and obs.frame_type != self.frame_type:
            return False
        if self._re is not None and not self._re.fullmatch(obs.reason):
            return False
        return True


@dataclass(frozen=True)
class TpRule:
    library: str
    ext_signatures: frozenset[str]
    kind: str
    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids:
            raise DbError(f"{self.library}: empty transport-parameter list")
        if self.kind not in (FIXED, RANDOMIZED):
            raise DbError(f"{self.library}: kind must be {FIXED!r} or {RANDOMIZED!r}")
        if not self.ext_signatures or not self.ext_signatures <= SIGNATURES:
            raise DbError(f"{self.library}: bad ext signatures {sorted(self.ext_signatures)}")

    @property
    def id_set(self) -> frozenset[int]:
        return frozenset(self.ids)

    def matches(self, sig: str, order: Sequence[int]) -> bool:
        if sig not in self.ext_signatures:
            return False
        if self.kind == FIXED:
            return tuple(order) == self.ids
        return len(order) == len(self.ids) and frozenset(order) == self.id_set


@dataclass(frozen=True)
class FingerprintDb:
    error_rules: tuple[ErrorRule, ...]
    tp_rules: tuple[TpRule, ...]
    version: str
    rehandshakes: int = 2

    @property
    def tp_rows(self) -> list[tuple[str, str, str, tuple[int, ...]]]:
        """One (library, signature, kind, ids) entry per table row."""
        return [(r.library, s, r.kind, r.ids) for r in self.tp_rules for s in sorted(r.ext_signatures)]

    @property
    def libraries(self) -> set[str]:
        return {r.library for r in self.error_rules} | {r.library for r in self.tp_rules}

    def kind_of(self, library: str) -> str | None:
        for r in self.tp_rules:
            if r.library == library:
                return r.kind
        return None

    def to_dict(self) -> dict:
        def hx(v):
            return None if v is None else hex(v)
        errors = []
        for r in self.error_rules:
            d: dict[str, Any] = {"library": r.library,
                                 "code": "any" if r.code is None and r.reason_pattern is not None else hx(r.code),
                                 "reason": r.reason_pattern}
            if r.frame_type is not None:
                d["frame_type"] = hx(r.frame_type)
            if r.behavior_flags:
                d["flags"] = sorted(r.behavior_flags)
            errors.append(d)
        rows = [{"library": lib, "ext": sig, "kind": kind, "ids": [hex(i) for i in ids]}
                for lib, sig, kind, ids in self.tp_rows]
        return {"version": self.version, "rehandshakes": self.rehandshakes,
                "error_rules": errors, "tp_rows": rows}


def _int(value, where: str) -> int | None:
    if value is None or value == "any":
        return None
    try:
        return int(value, 0) if isinstance(value, str) else int(value)
    except (TypeError, ValueError):
        raise DbError(f"{where}: {value!r} is not an integer") from None


def load_db(source: str | bytes | Path | Mapping | None = None) -> FingerprintDb:
    """Load and validate a db from JSON text, a path, a parsed mapping, or the bundled default."""
    if source is None:
        text = resources.files("quicfp").joinpath("data/default_db.json").read_text()
        data = json.loads(text)
    elif isinstance(source, Mapping):
        data = source
    elif isinstance(source, Path):
        data = json.loads(source.read_text())
    else:
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise DbError(f"db is not valid JSON: {exc}") from None
    if not isinstance(data, Mapping):
        raise DbError("db root must be an object")
    if "version" not in data:
        raise DbError("db lacks a version string")

    error_rules = []
    for n, d in enumerate(data.get("error_rules", [])):
        where = f"error_rules[{n}]"
        if "library" not in d:
            raise DbError(f"{where}: library missing")
        error_rules.append(ErrorRule(
            library=d["library"],
            code=_int(d.get("code"), where),
            reason_pattern=d.get("reason"),
            frame_type=_int(d.get("frame_type"), where),
            behavior_flags=frozenset(d.get("flags", ())),
        ))

    grouped: dict[tuple[str, str, tuple[int, ...]], set[str]] = {}
    seen_rows: set[tuple[str, str, tuple[int, ...]]] = set()
    for n, d in enumerate(data.get("tp_rows", [])):
        where = f"tp_rows[{n}]"
        try:
            lib, sig, kind, raw_ids = d["library"], d["ext"], d["kind"], d["ids"]
        except KeyError as exc:
            raise DbError(f"{where}: field {exc} missing") from None
        if sig not in SIGNATURES:
            raise DbError(f"{where}: ext signature {sig!r} not one of {sorted(SIGNATURES)}")
        ids = tuple(_int(i, where) for i in raw_ids)
        if kind == RANDOMIZED:
            if len(set(ids)) != len(ids):
                raise DbError(f"{where}: randomized set repeats an id")
            ids = tuple(sorted(ids))
        row = (sig, kind, ids)
        if kind == FIXED and row in seen_rows:
            raise DbError(f"{where}: duplicate fixed order {sig} {[hex(i) for i in ids]}")
        seen_rows.add(row)
        grouped.setdefault((lib, kind, ids), set()).add(sig)
    tp_rules = tuple(TpRule(lib, frozenset(sigs), kind, ids)
                     for (lib, kind, ids), sigs in grouped.items())

    rehandshakes = data.get("rehandshakes", 2)
    if not isinstance(rehandshakes, int) or rehandshakes < 1:
        raise DbError("rehandshakes must be a positive integer")
    return FingerprintDb(tuple(error_rules), tp_rules, str(data["version"]), rehandshakes)


# -- matching ---------------------------------------------------------------------------

def match_error(db: FingerprintDb, obs: ErrorObservation | None,
                flags: Iterable[str] = ()) -> list[str]:
    """Libraries whose error rules accept ``obs`` or the behavioral ``flags``."""
    flags = set(flags)
    libs: list[str] = []
    for rule in db.error_rules:
        hit = (rule.flag_only and FLAG_ALPN_MISSING in flags) or (obs is not None and rule.matches(obs))
        if hit and rule.library not in libs:
            libs.append(rule.library)
    return libs


def match_tp(db: FingerprintDb, sig: str, order: Sequence[int]) -> tuple[list[str], list[str]]:
    fixed = [r.library for r in db.tp_rules if r.kind == FIXED and r.matches(sig, order)]
    rand = [r.library for r in db.tp_rules if r.kind == RANDOMIZED and r.matches(sig, order)]
    return fixed, rand


def collisions(db: FingerprintDb) -> list[tuple[str, str]]:
    """Every (fixed library, randomized library) pair that one flight cannot separate."""
    pairs = []
    for f in db.tp_rules:
        if f.kind != FIXED:
            continue
        for r in db.tp_rules:
            if r.kind == RANDOMIZED and f.ext_signatures & r.ext_signatures and f.id_set == r.id_set \
                    and len(f.ids) == len(r.ids):
                pair = (f.library, r.library)
                if pair not in pairs:
                    pairs.append(pair)
    return pairs


def unique_error_libraries(db: FingerprintDb) -> set[str]:
    """Libraries that own at least one error rule no other library shares a match with.

    Computed rule-against-rule: a rule is unique when its defining triple is
    not accepted by any other library's rule.
    """
    out = set()
    for rule in db.error_rules:
        if rule.flag_only or rule.reason_pattern is None:
            continue
        probe = ErrorObservation(rule.code if rule.code is not None else 0, rule.frame_type,
                                 rule.reason_pattern.replace("*", "x"))
        if match_error(db, probe) == [rule.library]:
            out.add(rule.library)
    return out


# -- classification ---------------------------------------------------------------------

@dataclass
class Classification:
    library: str | None = None
    method: Method = Method.NONE
    ambiguous_with: list[str] = field(default_factory=list)
    needs_rehandshake: bool = False
    conflict: bool = False
    error_candidates: list[str] = field(default_factory=list)
    tp_candidates: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.library is not None and self.ambiguous_with:
            raise ValueError("an identified classification cannot be ambiguous")

    def to_dict(self) -> dict:
        return {"library": self.library, "method": self.method.value,
                "ambiguous_with": list(self.ambiguous_with),
                "needs_rehandshake": self.needs_rehandshake, "conflict": self.conflict,
                "error_candidates": list(self.error_candidates),
                "tp_candidates": list(self.tp_candidates)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Classification":
        return cls(d.get("library"), Method(d.get("method", "none")),
                   list(d.get("ambiguous_with", [])), bool(d.get("needs_rehandshake")),
                   bool(d.get("conflict")), list(d.get("error_candidates", [])),
                   list(d.get("tp_candidates", [])))


def classify(db: FingerprintDb, observations: Sequence[HandshakeObservation],
             rehandshakes: int | None = None) -> Classification:
    """Combine error and transport-parameter evidence from one target's probes.

    A collision between a fixed order and a randomized set is settled by
    the rehandshake orders: any two distinct orders rule out the fixed
    library, while ``1 + rehandshakes`` identical orders rule out the
    randomized one.
    """
    if not observations:
        raise ValueError("classify needs at least one observation")
    rehandshakes = db.rehandshakes if rehandshakes is None else rehandshakes

    unique: set[str] = set()
    group: set[str] | None = None
    for obs in observations:
        flags = [FLAG_ALPN_MISSING] if obs.alpn_missing_in_ee else []
        evidence = [match_error(db, e) for e in obs.errors()]
        if flags:
            evidence.append(match_error(db, None, flags))
        for libs in evidence:
            if len(libs) == 1:
                unique.add(libs[0])
            elif libs:
                group = set(libs) if group is None else group & set(libs)
    group = group or set()

    orders: list[tuple[int, ...]] = []
    cands: set[str] | None = None
    for obs in observations:
        if obs.tp_order is None or obs.ext_signature is None:
            continue
        order = tuple(normalize_tp_order(obs.tp_order))
        orders.append(order)
        fixed, rand = match_tp(db, obs.ext_signature, order)
        here = set(fixed) | set(rand)
        cands = here if cands is None else cands & here

    collision = False
    if cands:
        has_fixed = any(db.kind_of(c) == FIXED for c in cands)
        has_rand = any(db.kind_of(c) == RANDOMIZED for c in cands)
        collision = has_fixed and has_rand
        if len(set(orders)) >= 2:
            cands = {c for c in cands if db.kind_of(c) != FIXED}
        elif collision and len(orders) >= 1 + rehandshakes:
            cands = {c for c in cands if db.kind_of(c) != RANDOMIZED}

    err_list = sorted(unique or group)
    tp_list = sorted(cands or ())

    if len(unique) > 1:
        return Classification(None, Method.NONE, sorted(unique | (cands or set())),
                              conflict=True, error_candidates=err_list, tp_candidates=tp_list)
    if unique:
        (lib,) = unique
        if not cands:
            return Classification(lib, Method.ERROR, error_candidates=err_list, tp_candidates=tp_list)
        if lib in cands:
            return Classification(lib, Method.BOTH, error_candidates=err_list, tp_candidates=tp_list)
        return Classification(None, Method.NONE, sorted({lib} | cands), conflict=True,
                              error_candidates=err_list, tp_candidates=tp_list)
    if cands:
        if len(cands) == 1:
            (lib,) = cands
            method = Method.BOTH if lib in group else Method.TRANSPORT_PARAMS
            return Classification(lib, method, error_candidates=err_list, tp_candidates=tp_list)
        narrowed = cands & group
        if len(narrowed) == 1:
            (lib,) = narrowed
            return Classification(lib, Method.BOTH, error_candidates=err_list, tp_candidates=tp_list)
        return Classification(None, Method.NONE, sorted(cands), needs_rehandshake=collision,
                              error_candidates=err_list, tp_candidates=tp_list)
    if group:
        return Classification(None, Method.NONE, sorted(group), error_candidates=err_list)
    return Classification()


def lint(db: FingerprintDb) -> list[str]:
    """Invariant report for a loaded db; an empty list means clean."""
    problems = []
    seen: dict[tuple[str, tuple[int, ...]], str] = {}
    for lib, sig, kind, ids in db.tp_rows:
        if kind == FIXED:
            key = (sig, ids)
            if key in seen and seen[key] != lib:
                problems.append(f"fixed order {sig} {[hex(i) for i in ids]} shared by {seen[key]} and {lib}")
            seen.setdefault(key, lib)
        for i in ids:
            if is_grease_tp(i):
                problems.append(f"{lib}: GREASE id {i:#x} in a table row")
    kinds: dict[str, set[str]] = {}
    for r in db.tp_rules:
        kinds.setdefault(r.library, set()).add(r.kind)
    for lib, k in kinds.items():
        if len(k) > 1:
            problems.append(f"{lib}: mixes fixed and randomized rows")
    for n, rule in enumerate(db.error_rules):
        others = [r for r in db.error_rules if r is not rule and r.library == rule.library
                  and r.code == rule.code and r.reason_pattern == rule.reason_pattern
                  and r.frame_type == rule.frame_type]
        if others:
            problems.append(f"error_rules[{n}] ({rule.library}) duplicated")
    return problems
