"""Command line for scenario runs plus offline CA and privacy tooling.

Exit codes: 0 success, 2 input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

from . import crypto_core as cc
from .authority import CertificationAuthority
from .errors import InvariantViolation, ScenarioError, VanetSecError
from .mixzone import MixZone, Port, TraverseDistribution, parse_event_log, zone_report

log = logging.getLogger("vanetsec")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3


class InputError(Exception):
    pass


def _configure_logging() -> None:
    level = os.environ.get("VANETSEC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- run -------------------------------------------------------------------------


def _run_one(path: str, overrides: list[str], seed: int | None, out: str | None) -> tuple[int, str]:
    from .sim import load_scenario, run

    scenario = load_scenario(path, overrides, seed)
    result = run(scenario)
    metrics = result.metrics_csv()
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "trace.csv").write_text(result.trace_text())
        (d / "metrics.csv").write_text(metrics)
    return scenario.seed, metrics


def cmd_run(args) -> int:
    if not Path(args.scenario).is_file():
        raise InputError(f"{args.scenario}: no such file")
    if args.repeat == 1:
        _, metrics = _run_one(args.scenario, args.set, args.seed, args.out)
        if args.out is None:
            sys.stdout.write(metrics)
        return EXIT_OK
    # validate once up front so a bad override fails before any worker starts
    from .sim import load_scenario

    base = load_scenario(args.scenario, args.set, args.seed).seed
    seeds = [base + i for i in range(args.repeat)]
    outs = [None if args.out is None else str(Path(args.out) / f"seed_{s}") for s in seeds]
    jobs = [(args.scenario, args.set, s, o) for s, o in zip(seeds, outs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    if args.out is None:
        for seed, metrics in results:
            sys.stdout.write(f"# seed {seed}\n{metrics}")
    return EXIT_OK


# -- ca ----------------------------------------------------------------------------


def _load_ca(path: str) -> CertificationAuthority:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{path}: keystore not found")
    try:
        return CertificationAuthority.from_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise InputError(f"{path}: unreadable keystore ({exc})") from None


def _save_ca(ca: CertificationAuthority, path: str) -> None:
    Path(path).write_text(json.dumps(ca.to_dict(), indent=1, sort_keys=True) + "\n")


def cmd_ca(args) -> int:
    if args.action == "init":
        if Path(args.keystore).exists() and not args.force:
            raise InputError(f"{args.keystore}: already exists (use --force)")
        ca = CertificationAuthority(args.id, seed=args.seed if args.seed is not None else args.id,
                                    scheme=args.scheme, tau_ms=args.tau_ms)
        _save_ca(ca, args.keystore)
        print(f"ca_id={ca.ca_id} public_key={ca.public_key.hex()}")
        return EXIT_OK

    ca = _load_ca(args.keystore)
    if args.action == "issue":
        from .node import Node, NodeParams

        if args.subject in ca.registry:
            raise InputError(f"subject {args.subject!r} already registered")
        device_id = len(ca.registry) + 1
        node = Node.provision(args.subject, args.role, ca, device_id, now=args.now,
                              seed=("cli", ca.ca_id, args.subject),
                              params=NodeParams(set_size=args.count))
        node.pseudonym_refill(ca, args.now)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = []
        for j, p in enumerate(node.pool.current_set.pseudonyms):
            fp = cc.fingerprint(p).hex()
            (out / f"{j:04d}_{fp}.pseudonym").write_bytes(p.to_bytes())
            manifest.append({"index": j, "fingerprint": fp, "start": p.start, "end": p.end})
        (out / "manifest.json").write_text(json.dumps(
            {"ca_id": ca.ca_id, "ca_public_key": ca.public_key.hex(), "subject": args.subject,
             "pseudonyms": manifest}, indent=1) + "\n")
        _save_ca(ca, args.keystore)
        print(f"issued={len(manifest)} subject={args.subject} out={out}")
    elif args.action == "revoke":
        if args.identity:
            if args.target not in ca.registry:
                raise InputError(f"unknown subject {args.target!r}")
            fps = ca.revoke_identity(args.target, args.reason, args.now)
        else:
            try:
                fp = bytes.fromhex(args.target)
            except ValueError:
                raise InputError(f"{args.target!r}: not a hex fingerprint") from None
            if len(fp) != cc.FINGERPRINT_LEN:
                raise InputError(f"fingerprint must be {cc.FINGERPRINT_LEN} bytes")
            fps = ca.revoke(fp, args.reason, args.now)
        _save_ca(ca, args.keystore)
        print(f"revoked={len(fps)}")
    elif args.action in ("crl", "compress"):
        crl = ca.build_crl(args.now)
        if args.action == "crl":
            data = crl.to_bytes()
        else:
            data = ca.compress_crl(crl, args.fp).to_bytes()
        Path(args.out).write_bytes(data)
        _save_ca(ca, args.keystore)
        print(f"serial={crl.serial} entries={len(crl.entries)} bytes={len(data)}")
    return EXIT_OK


# -- privacy ---------------------------------------------------------------------


def _default_zone(zone_id: str, events) -> MixZone:
    """Zone over the log's port names with uniform priors; the traverse prior
    is wide enough for every enter/exit pair in the log."""
    names = sorted({e.port for e in events})
    span = max(e.time_ms for e in events) - min(e.time_ms for e in events)
    n = len(names)
    ports = [Port(name, float(i), 0.0) for i, name in enumerate(names)]
    square = Polygon([(0, 0), (max(n, 1), 0), (max(n, 1), 1), (0, 1)])
    return MixZone(zone_id, square, ports, np.full((n, n), 1.0 / n),
                   TraverseDistribution.uniform(span + 100.0), "unmonitored")


def cmd_privacy(args) -> int:
    path = Path(args.events)
    if not path.is_file():
        raise InputError(f"{args.events}: no such file")
    try:
        by_zone = parse_event_log(path.read_text())
    except ValueError as exc:
        raise InputError(f"{args.events}: {exc}") from None
    zones = {}
    if args.zones:
        try:
            raw = json.loads(Path(args.zones).read_text())
            raw = raw if isinstance(raw, list) else raw.get("zones", [raw])
            zones = {z["zone_id"]: MixZone.from_dict(z) for z in raw}
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise InputError(f"{args.zones}: {exc}") from None
    lines = []
    for zone_id in sorted(by_zone):
        events = by_zone[zone_id]
        zone = zones.get(zone_id) or _default_zone(zone_id, events)
        enters = sum(e.direction == "enter" for e in events)
        if enters != len(events) - enters:
            log.warning("zone %s: %d enters vs %d exits, padding with virtual events",
                        zone_id, enters, len(events) - enters)
        try:
            report = zone_report(zone, events, random.Random(args.seed))
        except (ValueError, KeyError) as exc:
            log.warning("zone %s: skipped (%s)", zone_id, exc)
            continue
        lines.append(report.to_line())
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vanetsec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="directory for trace.csv and metrics.csv (stdout metrics if omitted)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a scenario field, e.g. node.beacon_hz=1")
    run.add_argument("--repeat", type=int, default=1, help="run consecutive seeds starting at --seed")
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=cmd_run)

    ca = sub.add_parser("ca", help="certification authority keystore operations")
    ca.add_argument("action", choices=["init", "issue", "revoke", "crl", "compress"])
    ca.add_argument("keystore")
    ca.add_argument("target", nargs="?", help="fingerprint (hex) or, with --identity, a subject id")
    ca.add_argument("--id", default="CA")
    ca.add_argument("--scheme", choices=sorted(cc.SCHEMES), default="ed25519")
    ca.add_argument("--tau-ms", type=int, default=60_000)
    ca.add_argument("--seed")
    ca.add_argument("--force", action="store_true")
    ca.add_argument("--subject", default="vehicle-1")
    ca.add_argument("--role", default="private-vehicle", choices=list(cc.ROLES[:3]))
    ca.add_argument("--count", type=int, default=10)
    ca.add_argument("--identity", action="store_true")
    ca.add_argument("--reason", default="")
    ca.add_argument("--now", type=float, default=0.0)
    ca.add_argument("--fp", type=float, default=0.001)
    ca.add_argument("--out")
    ca.set_defaults(func=cmd_ca)

    privacy = sub.add_parser("privacy", help="entropy report for a mix-zone event log")
    privacy.add_argument("events")
    privacy.add_argument("zones", nargs="?")
    privacy.add_argument("--out")
    privacy.add_argument("--seed", type=int, default=0)
    privacy.set_defaults(func=cmd_privacy)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if args.command == "ca":
        needs = {"issue": "out", "crl": "out", "compress": "out", "revoke": "target"}
        missing = needs.get(args.action)
        if missing and not getattr(args, missing):
            print(f"error: ca {args.action} requires {'--' if missing == 'out' else ''}{missing}", file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INPUT
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except VanetSecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
