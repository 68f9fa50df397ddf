"""Throughput and latency benchmark for the in-process ledger.

Each writer thread owns its own sender key. For ``create`` each writer is an
issuer on its own contract and creates a fresh token per transaction. For
``spend`` each writer repeatedly spends one token that was created with a
very large redemption count. Transactions are signed by the writers inside
the timed window, as a blockchain client would.

With ``rate`` set, writers follow an open-loop schedule (transaction ``k``
of the whole run is due at ``k / rate`` seconds) and latency is measured
from the scheduled time, so queueing delay is not hidden. Without a rate
the writers run closed-loop as fast as the ledger answers.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import asdict, dataclass

from ..crypto_core import canonical, hash_bytes, random_keypair
from ..ledger import Create, Deploy, Ledger, LedgerTransaction, Spend

OPS = ("create", "spend")
BIG_COUNT = 10**12


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile of an already sorted list."""
    if not sorted_values:
        return float("nan")
    rank = max(1, -(-len(sorted_values) * q // 100))
    return sorted_values[int(rank) - 1]


@dataclass(frozen=True)
class BenchReport:
    op: str
    offered_rate: float | None
    achieved_tps: float
    latency_p50_ms: float
    latency_p95_ms: float
    latency_p99_ms: float
    duration_s: float
    writers: int
    submitted: int
    ok: int
    rejected: int
    state_consistent: bool
    config_fingerprint: str

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        offered = "unlimited" if self.offered_rate is None else f"{self.offered_rate:g} tx/s"
        return (
            f"{self.op}: offered {offered}, achieved {self.achieved_tps:.1f} tx/s over {self.duration_s:.2f} s "
            f"with {self.writers} writers; latency p50 {self.latency_p50_ms:.2f} ms, "
            f"p95 {self.latency_p95_ms:.2f} ms, p99 {self.latency_p99_ms:.2f} ms; "
            f"{self.ok} ok / {self.rejected} rejected of {self.submitted}"
        )


def bench(op: str = "create", rate: float | None = None, duration: float = 10.0, writers: int = 8,
          seed: int = 0) -> BenchReport:
    if op not in OPS:
        raise ValueError(f"op must be one of {OPS}")
    if writers < 1 or duration <= 0 or (rate is not None and rate <= 0):
        raise ValueError("writers >= 1, duration > 0 and rate > 0 (or None) required")
    rng = random.Random(seed)
    ledger = Ledger()
    try:
        senders, addresses, nonces = [], [], []
        for _ in range(writers):
            doctor = random_keypair(rng)
            address = ledger.send(doctor, Deploy()).contract_address
            if op == "create":
                senders.append(doctor)
            else:
                token = random_keypair(rng)
                ledger.send(doctor, Create(address, token.public_key, BIG_COUNT))
                senders.append(token)
            addresses.append(address)
            nonces.append(ledger.next_nonce(senders[-1].public_key))
        key_rngs = [random.Random(rng.getrandbits(64)) for _ in range(writers)]

        latencies: list[list[float]] = [[] for _ in range(writers)]
        oks = [0] * writers
        rejected = [0] * writers
        barrier = threading.Barrier(writers + 1)
        start_box = [0.0]

        def writer(i):
            sender, address, key_rng = senders[i], addresses[i], key_rngs[i]
            nonce = nonces[i]
            lat = latencies[i]
            barrier.wait()
            start = start_box[0]
            end = start + duration
            k = i
            while True:
                if rate is not None:
                    due = start + k / rate
                    if due >= end:
                        break
                    now = time.perf_counter()
                    if now < due:
                        time.sleep(due - now)
                    t0 = due
                    k += writers
                else:
                    t0 = time.perf_counter()
                    if t0 >= end:
                        break
                if op == "create":
                    command = Create(address, key_rng.randbytes(32), 1)
                else:
                    command = Spend(address)
                receipt = ledger.submit(LedgerTransaction.signed(sender, nonce, command))
                nonce += 1
                lat.append(time.perf_counter() - t0)
                if receipt.ok:
                    oks[i] += 1
                else:
                    rejected[i] += 1

        threads = [threading.Thread(target=writer, args=(i,), daemon=True) for i in range(writers)]
        for t in threads:
            t.start()
        start_box[0] = time.perf_counter()
        barrier.wait()
        for t in threads:
            t.join()
        wall = time.perf_counter() - start_box[0]

        ok, rej = sum(oks), sum(rejected)
        submitted = sum(len(x) for x in latencies)
        elapsed = max(duration, wall)
        state = ledger.state_dict()
        consistent = ok + rej == submitted
        if op == "create":
            tokens = sum(len(state["contracts"][a.hex()]["prescriptions"]) for a in addresses)
            consistent = consistent and tokens == ok
        else:
            left = sum(ledger.query_token(a, s.public_key).remaining_redemptions for a, s in zip(addresses, senders))
            consistent = consistent and left == writers * BIG_COUNT - ok
        all_lat = sorted(x * 1000.0 for lane in latencies for x in lane)
        config = {"op": op, "rate": rate if rate is None else str(rate), "duration": str(duration),
                  "writers": writers, "seed": seed}
        return BenchReport(
            op,
            rate,
            submitted / elapsed,
            percentile(all_lat, 50),
            percentile(all_lat, 95),
            percentile(all_lat, 99),
            elapsed,
            writers,
            submitted,
            ok,
            rej,
            consistent,
            hash_bytes(canonical(config)).hex()[:16],
        )
    finally:
        ledger.close()
