"""Onboard, connect, prescribe and redeem over the loopback TCP transport,
repeated, with per-phase timings."""

import argparse
import random
import statistics

from rxledger.harness.flow import loopback_flow

PHASES = ("onboard", "connect", "prescribe", "redeem")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    master = random.Random(args.seed)
    results = [loopback_flow(random.Random(master.getrandbits(64))) for _ in range(args.runs)]
    failed = [r for r in results if r.status != "dispense-approved"]
    print(f"{'phase':<10} {'median ms':>9} {'max ms':>8}")
    for phase in PHASES:
        values = [r.timings_ms[phase] for r in results]
        print(f"{phase:<10} {statistics.median(values):>9.2f} {max(values):>8.2f}")
    totals = [r.total_ms for r in results]
    print(f"{'total':<10} {statistics.median(totals):>9.2f} {max(totals):>8.2f}")
    if failed:
        print(f"{len(failed)} runs did not end in dispense-approved: {failed[0]}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
