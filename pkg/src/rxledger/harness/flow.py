"""Happy-path flow over real sockets: onboard, connect, prescribe, redeem.

Used by the ``demo`` command and by the end-to-end latency check. Agents run
on the loopback transport, so handlers execute on server threads; the main
thread waits on observer events.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field

from ..agents import Doctor, Patient, Pharmacy, auto_accept
from ..identity_registry import Registry
from ..ledger import Ledger
from ..transport import LoopbackTransport

DEMO_ATTRIBUTES = {"patient_name": "A. Patient", "pharmaceutical": "Amoxicillin 500mg", "quantity": "20"}


class EventWaiter:
    """Observer that records events and lets the caller block on a predicate."""

    def __init__(self, echo=None):
        self.events: list[tuple[str, str, dict]] = []
        self._cond = threading.Condition()
        self._echo = echo

    def __call__(self, actor: str, kind: str, data: dict) -> None:
        with self._cond:
            self.events.append((actor, kind, data))
            self._cond.notify_all()
        if self._echo is not None:
            self._echo(actor, kind, data)

    def wait_for(self, predicate, timeout: float = 5.0, what: str = "event"):
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                result = predicate()
                if result:
                    return result
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"timed out waiting for {what}")
                self._cond.wait(min(left, 0.005))

    def find(self, actor: str, kind: str):
        return next((d for a, k, d in self.events if a == actor and k == kind), None)


@dataclass
class FlowResult:
    status: str
    reason: str | None
    remaining_redemptions: int | None
    timings_ms: dict[str, float] = field(default_factory=dict)
    agent_errors: list[str] = field(default_factory=list)

    @property
    def total_ms(self) -> float:
        return sum(self.timings_ms.values())


def loopback_flow(rng: random.Random | None = None, attributes: dict | None = None, count: int = 1,
                  consent=auto_accept, on_pending=None, echo=None, timeout: float = 5.0,
                  ledger_log=None, registry_path=None, records_path=None) -> FlowResult:
    """Run one prescription from onboarding to dispensing.

    ``consent`` is the patient's decision callback. When it returns ``None``
    the decision is left pending and ``on_pending(patient, kind, item)`` is
    called from the calling thread to resolve it (the interactive demo uses
    this to prompt).
    """
    rng = rng or random.SystemRandom()
    waiter = EventWaiter(echo)
    transport = LoopbackTransport()
    registry = Registry(registry_path)
    ledger = Ledger(ledger_log)
    timings: dict[str, float] = {}
    try:
        doctor = Doctor("doctor", transport, registry, ledger, random.Random(rng.getrandbits(64)), observer=waiter)
        patient = Patient("patient", transport, registry, random.Random(rng.getrandbits(64)), consent=consent,
                          observer=waiter)
        pharmacy = Pharmacy("pharmacy", transport, registry, ledger, random.Random(rng.getrandbits(64)),
                            records_path=records_path, observer=waiter)
        pharmacy.onboard()

        t0 = time.perf_counter()
        ob = doctor.onboard()
        pharmacy.trust(ob.did)
        t1 = time.perf_counter()
        timings["onboard"] = (t1 - t0) * 1000

        conn = patient.accept_invitation(doctor.invite())
        waiter.wait_for(lambda: conn.state == "active" and conn.session_id in doctor.connections, timeout,
                        "doctor connection")
        t2 = time.perf_counter()
        timings["connect"] = (t2 - t1) * 1000

        session = doctor.prescribe(conn.session_id, attributes or DEMO_ATTRIBUTES, count)
        _resolve(waiter, patient, "credential-offer", patient.pending_offers, on_pending, timeout,
                 lambda: session.offer_id in patient.wallet.credentials or session.status != "offered")
        waiter.wait_for(lambda: session.offer_id in patient.wallet.credentials or session.status == "declined",
                        timeout, "credential delivery")
        t3 = time.perf_counter()
        timings["prescribe"] = (t3 - t2) * 1000
        if session.status == "declined":
            return FlowResult("declined", "offer-declined", None, timings, [e.code for e in _errors(doctor, patient, pharmacy)])

        patient.accept_invitation(pharmacy.static_invitation())
        _resolve(waiter, patient, "proof-request", patient.pending_requests, on_pending, timeout,
                 lambda: patient.results)
        outcome = waiter.wait_for(lambda: patient.results and patient.results[-1], timeout, "redemption result")
        t4 = time.perf_counter()
        timings["redeem"] = (t4 - t3) * 1000
        return FlowResult(outcome["status"], outcome.get("reason"), outcome.get("remaining_redemptions"), timings,
                          [e.code for e in _errors(doctor, patient, pharmacy)])
    finally:
        transport.close()
        ledger.close()
        registry.close()


def _errors(*agents):
    return [e for a in agents for e in a.errors]


def _resolve(waiter, patient, kind, pending, on_pending, timeout, done):
    """Let ``on_pending`` decide items the consent callback left open."""
    if on_pending is None:
        return
    item = waiter.wait_for(lambda: done() or next(iter(pending.values()), None), timeout, kind)
    if item is True or not hasattr(item, "session_id"):
        return
    on_pending(patient, kind, item)
