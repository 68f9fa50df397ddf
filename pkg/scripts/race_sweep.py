"""Double-spend race over a grid of redemption counts and spender counts."""

import argparse
import random
import time

from rxledger.harness.race import race_test


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    ap.add_argument("--spenders", type=int, nargs="+", default=[2, 10, 100])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    unsafe = 0
    print(f"{'count':>5} {'spenders':>8} {'runs':>5} {'ok':>5} {'rejected':>8} {'unsafe':>6} {'ms/run':>7}")
    for count in args.counts:
        for spenders in args.spenders:
            start = time.perf_counter()
            results = [race_test(count, spenders, random.Random(rng.getrandbits(64))) for _ in range(args.repeat)]
            ms = (time.perf_counter() - start) * 1000 / args.repeat
            bad = sum(not r.safe for r in results)
            unsafe += bad
            print(f"{count:>5} {spenders:>8} {args.repeat:>5} {results[0].ok_count:>5} "
                  f"{results[0].rejected_count:>8} {bad:>6} {ms:>7.1f}")
    raise SystemExit(1 if unsafe else 0)


if __name__ == "__main__":
    main()
