"""Command-line entry point: ``quicfp scan | classify | db-lint | merge | lab``."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .capture import CaptureError
from .fingerprint import DbError, classify, collisions, lint, load_db
from .probe import ProbeConfig
from .scanner import (
    PROBES,
    Blocklist,
    ScanJob,
    TargetParseError,
    ingest_targets,
    merge_results,
    read_records,
    run_scan,
)
from .wire import DEFAULT_RESERVED_VERSION, is_reserved_version

EXIT_FATAL = 2


def _db(path: str | None):
    return load_db(Path(path)) if path else load_db()


def _version(text: str) -> int:
    v = int(text, 16)
    if not is_reserved_version(v):
        raise argparse.ArgumentTypeError(f"{text} does not match the reserved pattern 0x?a?a?a?a")
    return v


def _probes(text: str) -> frozenset[str]:
    names = frozenset(p.strip() for p in text.split(",") if p.strip())
    bad = names - set(PROBES)
    if bad or not names:
        raise argparse.ArgumentTypeError(f"probes must be a subset of {','.join(PROBES)}")
    return names


def cmd_scan(args) -> int:
    db = _db(args.db)
    targets = ingest_targets(args.targets, sni_limit=args.sni_limit)
    blocklist = Blocklist.load(args.blocklist) if args.blocklist else Blocklist()
    cfg = ProbeConfig(response_timeout=args.timeout / 1000.0, reserved_version=args.reserved_version)
    job = ScanJob(targets, args.probes, args.rate, blocklist, args.out, db, cfg,
                  rehandshakes=args.rehandshakes, vn_gating=not args.no_vn_gating, workers=args.workers)
    counts: dict[str, int] = {}
    for rec in run_scan(job):
        lib = rec.classification.library or "-"
        counts[lib] = counts.get(lib, 0) + 1
        if args.verbose:
            print(f"{rec.key} {rec.status} {lib} {rec.classification.method.value}")
    print(f"scanned {sum(counts.values())} targets -> {args.out}", file=sys.stderr)
    return 0


def _flight_dirs(root: Path) -> list[Path]:
    if any(root.glob("*.qfcap")):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("*.qfcap")))


def cmd_classify(args) -> int:
    from .labharness.golden import load_flight_dir

    db = _db(args.db)
    root = Path(args.flights)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    results = {}
    for d in _flight_dirs(root):
        cls = classify(db, load_flight_dir(d))
        results[d.name] = cls.to_dict()
        if not args.json:
            lib = cls.library or ("conflict" if cls.conflict else "-")
            extra = f" ambiguous={','.join(cls.ambiguous_with)}" if cls.ambiguous_with else ""
            print(f"{d.name}\t{lib}\t{cls.method.value}{extra}")
    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_db_lint(args) -> int:
    db = _db(args.db)
    problems = lint(db)
    print(f"db {db.version}: {len(db.error_rules)} error rules, {len(db.tp_rows)} tp rows, "
          f"{len({r.library for r in db.tp_rules})} tp libraries")
    for fixed, rand in collisions(db):
        print(f"collision: {fixed} (fixed) / {rand} (randomized)")
    for p in problems:
        print(f"problem: {p}")
    return 1 if problems else 0


def cmd_merge(args) -> int:
    merged = merge_results(read_records(args.no_sni), read_records(args.sni))
    with open(args.out, "w") as fh:
        for m in merged:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")
    return 0


def cmd_lab_serve(args) -> int:
    from .labharness import Farm

    farm = Farm(seed=args.seed, host=args.host).start()
    if args.manifest:
        farm.save_manifest(args.manifest)
    for lib, (host, port) in farm.endpoints.items():
        print(f"{host},{port}\t{lib}")
    sys.stdout.flush()
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait(args.duration if args.duration > 0 else None)
    except KeyboardInterrupt:
        pass
    farm.stop()
    return 0


def cmd_lab_golden(args) -> int:
    from .labharness import generate_golden

    manifest = generate_golden(args.out, seed=args.seed)
    print(f"wrote {len(manifest['libraries'])} libraries to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quicfp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", help="probe targets and classify them")
    s.add_argument("--targets", required=True)
    s.add_argument("--db")
    s.add_argument("--out", required=True)
    s.add_argument("--probes", type=_probes, default=frozenset(PROBES))
    s.add_argument("--rate", type=float, default=100.0, help="datagrams per second")
    s.add_argument("--blocklist")
    s.add_argument("--sni-limit", type=int, default=100)
    s.add_argument("--timeout", type=int, default=3000, help="response timeout in ms")
    s.add_argument("--rehandshakes", type=int)
    s.add_argument("--reserved-version", type=_version, default=DEFAULT_RESERVED_VERSION)
    s.add_argument("--workers", type=int, default=8)
    s.add_argument("--no-vn-gating", action="store_true")
    s.set_defaults(func=cmd_scan)

    c = sub.add_parser("classify", help="classify captured flights offline")
    c.add_argument("--flights", required=True)
    c.add_argument("--db")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_classify)

    d = sub.add_parser("db-lint", help="check fingerprint db invariants")
    d.add_argument("--db")
    d.set_defaults(func=cmd_db_lint)

    m = sub.add_parser("merge", help="merge no-SNI and SNI scan outputs")
    m.add_argument("--no-sni", required=True)
    m.add_argument("--sni", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    lab = sub.add_parser("lab", help="lab harness utilities")
    lsub = lab.add_subparsers(dest="lab_command", required=True)
    ls = lsub.add_parser("serve", help="serve every scripted library on loopback")
    ls.add_argument("--seed", type=int, default=0)
    ls.add_argument("--host", default="127.0.0.1")
    ls.add_argument("--manifest")
    ls.add_argument("--duration", type=float, default=0, help="seconds to serve (0: until interrupted)")
    ls.set_defaults(func=cmd_lab_serve)
    lg = lsub.add_parser("golden", help="regenerate golden captures")
    lg.add_argument("--out", required=True)
    lg.add_argument("--seed", type=int, default=0)
    lg.set_defaults(func=cmd_lab_golden)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, DbError, TargetParseError, CaptureError) as exc:
        print(f"quicfp: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
