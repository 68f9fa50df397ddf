"""Concurrent double-spend race against the threaded ledger."""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass

from ..crypto_core import random_keypair
from ..ledger import ALREADY_SPENT, Create, Deploy, Ledger, LedgerReceipt, Spend


@dataclass(frozen=True)
class RaceResult:
    count: int
    spenders: int
    ok_count: int
    rejected_count: int
    already_spent: int
    remaining: int
    heights: tuple[int, ...]

    @property
    def expected_ok(self) -> int:
        return min(self.count, self.spenders)

    @property
    def safe(self) -> bool:
        return (
            self.ok_count == self.expected_ok
            and self.rejected_count == self.spenders - self.ok_count
            and self.already_spent == self.rejected_count
            and self.remaining == self.count - self.ok_count
        )


def race_test(count: int, spenders: int, rng: random.Random | None = None, ledger: Ledger | None = None,
              max_jitter: float = 200e-6) -> RaceResult:
    """One token with ``count`` redemptions, ``spenders`` threads all holding
    its spending key. Threads are started in shuffled order, released
    together by a barrier, and each sleeps a random jitter before submitting,
    so the ledger sees a different interleaving on every run."""
    rng = rng or random.Random()
    own = ledger is None
    ledger = ledger or Ledger()
    try:
        doctor = random_keypair(rng)
        address = ledger.send(doctor, Deploy()).contract_address
        prescription = random_keypair(rng)
        created = ledger.send(doctor, Create(address, prescription.public_key, count))
        if not created.ok:
            raise RuntimeError(f"token creation failed: {created.message}")

        receipts: list[LedgerReceipt | None] = [None] * spenders
        jitters = [rng.random() * max_jitter for _ in range(spenders)]
        barrier = threading.Barrier(spenders)

        def spend(i):
            barrier.wait()
            if jitters[i]:
                time.sleep(jitters[i])
            receipts[i] = ledger.send(prescription, Spend(address))

        order = list(range(spenders))
        rng.shuffle(order)
        threads = [threading.Thread(target=spend, args=(i,)) for i in order]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        ok = [r for r in receipts if r.ok]
        token = ledger.query_token(address, prescription.public_key)
        return RaceResult(
            count,
            spenders,
            len(ok),
            spenders - len(ok),
            sum(1 for r in receipts if r.message == ALREADY_SPENT),
            token.remaining_redemptions,
            tuple(sorted(r.height for r in receipts)),
        )
    finally:
        if own:
            ledger.close()
