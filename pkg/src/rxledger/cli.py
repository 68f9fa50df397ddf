"""Command line entry point: ``rxledger <command> ...``.

Exit codes: 0 success, 1 an expectation or check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from .crypto_core import b64d, b64e, to_jsonable
from .errors import RxError
from .harness.bench import OPS, bench
from .harness.flow import loopback_flow
from .harness.race import race_test
from .harness.scenario import BUNDLED, run_scenario
from .identity_registry import Registry
from .ledger import read_log, replay

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def _address(text: str) -> bytes:
    try:
        raw = bytes.fromhex(text) if len(text) == 64 else b64d(text)
    except (ValueError, RxError):
        raise UsageError(f"contract address must be 64 hex chars or base64url: {text!r}") from None
    if len(raw) != 32:
        raise UsageError("contract address must decode to 32 bytes")
    return raw


def _json_default(value):
    if isinstance(value, (bytes, bytearray)):
        return b64e(bytes(value))
    raise TypeError(f"cannot show {type(value).__name__}")


def _print_json(value) -> None:
    # display only, so floats are fine here
    print(json.dumps(value, default=_json_default, indent=2, sort_keys=True, ensure_ascii=False))


# -- commands --------------------------------------------------------------------------


def cmd_run_scenario(args) -> int:
    source = args.file
    if not Path(source).exists() and source not in BUNDLED:
        raise UsageError(f"no scenario file {source!r} (bundled: {', '.join(BUNDLED)})")
    result = run_scenario(source, seed=args.seed)
    data = result.transcript_bytes()
    if args.transcript:
        Path(args.transcript).write_bytes(data)
    for step in result.transcript["steps"]:
        mark = "ok  " if step["ok"] else "FAIL"
        print(f"{mark} step {step['index']:>2} {step['op']:<14} {json.dumps(step['result'], sort_keys=True)}")
    for violation in result.violations:
        print(f"violation: {violation}")
    print(f"{result.scenario}: {'passed' if result.exit_code == 0 else 'FAILED'}")
    return result.exit_code


def cmd_bench(args) -> int:
    rate = None if args.rate in (None, 0) else args.rate
    report = bench(args.op, rate, args.duration, args.writers, seed=args.seed)
    if args.json:
        _print_json(report.to_dict())
    else:
        print(report.summary())
        print(f"accounting {'consistent' if report.state_consistent else 'INCONSISTENT'}, "
              f"config {report.config_fingerprint}")
    return EXIT_OK if report.state_consistent else EXIT_FAILED


def cmd_race(args) -> int:
    rng = random.Random(args.seed) if args.seed is not None else random.SystemRandom()
    failures = 0
    for i in range(args.repeat):
        r = race_test(args.count, args.spenders, rng)
        failures += not r.safe
        print(f"run {i + 1}: {r.ok_count} ok, {r.rejected_count} rejected "
              f"({r.already_spent} 'Already spent'), remaining {r.remaining}"
              f"{'' if r.safe else '  UNSAFE'}")
    return EXIT_OK if failures == 0 else EXIT_FAILED


def cmd_inspect_ledger(args) -> int:
    path = args.log or args.replay
    entries = read_log(path)
    result = replay(entries)
    state = result.state
    if args.contract:
        contract = state.contracts.get(_address(args.contract))
        if contract is None:
            print("unknown contract")
            return EXIT_FAILED
        _print_json({"address": b64e(contract.address), **contract.to_dict()})
    elif args.replay:
        print(f"replayed {len(entries)} entries, height {state.height}")
        print(f"state digest {state.state_digest().hex()}")
        print(f"receipt mismatches: {result.mismatches or 'none'}")
    else:
        for entry in entries:
            r = entry.receipt
            detail = r.message or r.error_code or ""
            print(f"{entry.height:>6} {entry.tx.command.op:<10} {r.status:<9} {detail}")
        print(f"{len(entries)} entries, {len(state.contracts)} contracts")
    return EXIT_FAILED if result.mismatches else EXIT_OK


def cmd_inspect_registry(args) -> int:
    registry = Registry(args.store)
    try:
        shown = 0
        for record in registry.records(args.kind):
            _print_json(record.to_dict()) if args.verbose else print(_registry_line(record))
            shown += 1
        print(f"{shown} of {len(registry)} records")
    finally:
        registry.close()
    return EXIT_OK


def _registry_line(record) -> str:
    body = record.body
    if record.kind == "did":
        return f"{record.seq:>4} did        {body['did']} role={body['role']}"
    if record.kind == "schema":
        return f"{record.seq:>4} schema     {body['name']} v{body['version']} ({len(body['attribute_names'])} attributes)"
    if record.kind == "creddef":
        return f"{record.seq:>4} creddef    issuer={body['creddef']['issuer_did']}"
    if record.kind == "revocation":
        return f"{record.seq:>4} revocation epoch={body['epoch']} registry={body['registry_id'][:12]}..."
    return f"{record.seq:>4} {record.kind}"


def cmd_demo(args) -> int:
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def echo(actor, kind, data):
        if kind in ("onboarded", "connected", "credential-issued", "credential-stored", "verification",
                    "ledger-receipt", "redemption", "rejected"):
            shown = {k: v for k, v in to_jsonable(data).items() if k not in ("disclosed",)}
            print(f"  [{actor}] {kind} {json.dumps(shown, sort_keys=True)}")

    def ask(question: str) -> bool:
        answer = input(f"{question} [y/N] ").strip().lower()
        return answer in ("y", "yes")

    def on_pending(patient, kind, item):
        if kind == "credential-offer":
            preview = item.body["preview"]
            if ask(f"Patient: accept prescription {preview.get('pharmaceutical')} x{preview.get('quantity')}?"):
                patient.accept_offer(item.offer_id)
            else:
                patient.decline_offer(item.offer_id)
        else:
            names = sorted(item.request.requested_attribute_names)
            if ask(f"Patient: share {', '.join(names)} with the pharmacy?"):
                patient.respond(item.request_id)
            else:
                patient.decline_request(item.request_id)

    interactive = not args.yes
    result = loopback_flow(
        random.Random(args.seed) if args.seed is not None else None,
        consent=(lambda kind, details: None) if interactive else (lambda kind, details: True),
        on_pending=on_pending if interactive else None,
        echo=echo,
        timeout=300.0 if interactive else 5.0,
        ledger_log=out / "ledger.ndjson" if out else None,
        registry_path=out / "registry.ndjson" if out else None,
        records_path=out / "redemptions.jsonl" if out else None,
    )
    timings = ", ".join(f"{k} {v:.1f} ms" for k, v in result.timings_ms.items())
    print(f"result: {result.status}{' (' + result.reason + ')' if result.reason else ''}")
    print(f"timings: {timings}")
    if out is not None:
        print(f"ledger log, registry store and redemption records written to {out}/")
    return EXIT_OK if result.status in ("dispense-approved", "declined") and not result.agent_errors else EXIT_FAILED


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxledger", description="E-prescription ledger and credential toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-scenario", help="run a scenario file or bundled scenario name")
    p.add_argument("file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--transcript", metavar="OUT", help="write the normalized transcript here")
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("bench", help="ledger throughput and latency")
    p.add_argument("--op", choices=OPS, default="create")
    p.add_argument("--rate", type=float, default=None, help="offered tx/s; omit or 0 for closed loop")
    p.add_argument("--duration", type=_positive_float, default=10.0)
    p.add_argument("--writers", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("race", help="concurrent spends of one token")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--spenders", type=_positive_int, required=True)
    p.add_argument("--repeat", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_race)

    p = sub.add_parser("inspect-ledger", help="list, replay or query a ledger log")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--log", metavar="FILE")
    src.add_argument("--replay", metavar="FILE", help="replay and compare receipts")
    p.add_argument("--contract", metavar="ADDR", help="show one contract (hex or base64url)")
    p.set_defaults(func=cmd_inspect_ledger)

    p = sub.add_parser("inspect-registry", help="list records of a registry store")
    p.add_argument("--store", required=True, metavar="FILE")
    p.add_argument("--kind", choices=("did", "schema", "creddef", "revocation"))
    p.add_argument("--verbose", action="store_true", help="print full records")
    p.set_defaults(func=cmd_inspect_registry)

    p = sub.add_parser("demo", help="happy path over loopback sockets with consent prompts")
    p.add_argument("--yes", action="store_true", help="accept every consent prompt")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", metavar="DIR", help="persist ledger log, registry and redemption records")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "rate", None) is not None and args.rate < 0:
        print("rxledger: error: --rate must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"rxledger: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RxError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"rxledger: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
