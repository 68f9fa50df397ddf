"""Deterministic scenario runner.

A scenario is a JSON document naming the actors and an ordered script of
steps. Every actor draws its randomness from a ``random.Random`` derived from
the scenario seed, and messages move only when the runner steps the
in-memory network. The same seed and script therefore reproduce the same
transcript byte for byte. Keys, salts, DIDs and other random identifiers are
replaced by stable aliases (``K1``, ``K2``, ...) so transcripts from
different seeds can be diffed as well. See ``docs/scenario.md`` for the
schema.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from ..agents import Doctor, Patient, Pharmacy
from ..crypto_core import to_jsonable, b64e, canonical, canonical_parse
from ..errors import RxError
from ..identity_registry import Registry
from ..ledger import Create, Ledger
from ..transport import InMemoryNetwork

BUNDLED = (
    "happy_path",
    "double_spend_race",
    "revoked",
    "tampered_presentation",
    "replayed_nonce",
    "untrusted_issuer",
    "non_admin_create",
    "over_spend",
    "declined_offer",
)

DEFAULT_ATTRIBUTES = {"patient_name": "A. Patient", "pharmaceutical": "Amoxicillin 500mg", "quantity": "20"}


@dataclass
class Scenario:
    name: str
    seed: int
    actors: dict
    steps: list[dict]
    delivery: str = "fifo"

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        for key in ("name", "actors", "steps"):
            if key not in d:
                raise ValueError(f"scenario is missing {key!r}")
        if d.get("delivery", "fifo") not in ("fifo", "random"):
            raise ValueError("delivery must be 'fifo' or 'random'")
        return cls(d["name"], int(d.get("seed", 0)), d["actors"], list(d["steps"]), d.get("delivery", "fifo"))

    @classmethod
    def load(cls, source: str | Path) -> "Scenario":
        path = Path(source)
        if not path.exists() and str(source) in BUNDLED:
            text = resources.files("rxledger.scenarios").joinpath(f"{source}.json").read_text(encoding="utf-8")
        else:
            text = path.read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


@dataclass
class RunResult:
    scenario: str
    transcript: dict
    violations: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.violations else 0

    def transcript_bytes(self) -> bytes:
        return json.dumps(self.transcript, indent=1, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n"


_DID_RE = re.compile(r"did:rx:[A-Za-z0-9_-]{22}")
_B64_LENGTHS = (22, 43, 86)
_B64_RE = re.compile(r"^[A-Za-z0-9_-]+$")


class Aliaser:
    """Replaces random-looking identifiers by first-appearance aliases."""

    def __init__(self):
        self._aliases: dict[str, str] = {}

    def alias(self, token: str) -> str:
        if token not in self._aliases:
            self._aliases[token] = f"K{len(self._aliases) + 1}"
        return self._aliases[token]

    def __call__(self, value: Any) -> Any:
        if isinstance(value, dict):
            return {k: self(v) for k, v in value.items()}
        if isinstance(value, list):
            return [self(v) for v in value]
        if isinstance(value, str):
            if len(value) in _B64_LENGTHS and _B64_RE.match(value) and not value.isalpha():
                return self.alias(value)
            return _DID_RE.sub(lambda m: self.alias(m.group(0)), value)
        return value


class World:
    """All actors of one scenario run plus the shared registry and ledger."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        master = random.Random(scenario.seed)
        self._seeds = master
        delivery_rng = random.Random(master.getrandbits(64)) if scenario.delivery == "random" else None
        self.network = InMemoryNetwork(delivery_rng)
        self.network.on_deliver = self._on_deliver
        self.registry = Registry()
        self.ledger = Ledger()
        self.events: list[dict] = []
        self.doctors: dict[str, Doctor] = {}
        self.patients: dict[str, Patient] = {}
        self.pharmacies: dict[str, Pharmacy] = {}
        self.sessions: dict[tuple[str, str], str] = {}
        self.prescriptions: dict[str, tuple[str, str]] = {}  # label -> (doctor, offer_id)
        self._trust_all: set[str] = set()
        self._trust_lists: dict[str, list[str]] = {}
        actors = scenario.actors
        for name in actors.get("doctors", []):
            self.doctors[name] = Doctor(name, self.network, self.registry, self.ledger, self._rng(), observer=self._observe)
        for name in actors.get("patients", []):
            self.patients[name] = Patient(name, self.network, self.registry, self._rng(), observer=self._observe)
        for entry in actors.get("pharmacies", []):
            entry = {"name": entry} if isinstance(entry, str) else entry
            name = entry["name"]
            ph = Pharmacy(name, self.network, self.registry, self.ledger, self._rng(),
                          request_patient_name=entry.get("request_patient_name", False), observer=self._observe)
            trust = entry.get("trust", "all")
            if trust == "all":
                self._trust_all.add(name)
            else:
                self._trust_lists[name] = list(trust)
            self.pharmacies[name] = ph
            ph.onboard()

    def _rng(self) -> random.Random:
        return random.Random(self._seeds.getrandbits(64))

    def close(self):
        self.ledger.close()

    # -- observation --------------------------------------------------------------

    def _observe(self, actor: str, kind: str, data: dict) -> None:
        self.events.append({"t": self.network.clock, "actor": actor, "event": kind, **data})

    def _on_deliver(self, delivery) -> None:
        env = canonical_parse(delivery.data)
        self.events.append({
            "t": delivery.step,
            "event": "deliver",
            "to": delivery.destination,
            "type": env["type"],
            "session_id": env["session_id"],
            "seq": env["seq"],
            "size": len(delivery.data),
        })

    # -- helpers ---------------------------------------------------------------------

    def agent(self, name: str):
        for group in (self.doctors, self.patients, self.pharmacies):
            if name in group:
                return group[name]
        raise KeyError(f"unknown actor {name!r}")

    def refresh_trust(self) -> None:
        onboarded = [d.did for d in self.doctors.values() if d.onboardings]
        for name in self._trust_all:
            self.pharmacies[name].trusted_issuer_dids.update(onboarded)
        for name, doctors in self._trust_lists.items():
            for doc_name in doctors:
                doc = self.doctors.get(doc_name)
                if doc is not None and doc.onboardings:
                    self.pharmacies[name].trust(doc.did)

    def connect(self, patient: str, other: str) -> str:
        pt = self.patients[patient]
        target = self.agent(other)
        invitation = target.static_invitation() if isinstance(target, Pharmacy) else target.invite()
        conn = pt.accept_invitation(invitation)
        self.network.run_until_idle()
        self.sessions[(patient, other)] = conn.session_id
        return conn.session_id

    # -- steps ------------------------------------------------------------------------

    def run_step(self, step: dict) -> dict:
        op = step["op"]
        handler = getattr(self, "_step_" + op, None)
        if handler is None:
            raise ValueError(f"unknown step op {op!r}")
        try:
            return handler(step)
        except RxError as exc:
            return {"status": "error", "error": exc.code}

    def _step_onboard(self, step):
        if "doctor" in step:
            ob = self.doctors[step["doctor"]].onboard()
            self.refresh_trust()
            return {"status": "ok", "did": ob.did, "contract_address": b64e(ob.contract_address)}
        raise ValueError("onboard step needs a doctor")

    def _step_connect(self, step):
        sid = self.connect(step["patient"], step["to"])
        conn = self.patients[step["patient"]].connections[sid]
        return {"status": "ok" if conn.state == "active" else "failed", "session_id": sid}

    def _step_prescribe(self, step):
        doctor = self.doctors[step["doctor"]]
        patient = self.patients[step["patient"]]
        key = (step["patient"], step["doctor"])
        if key not in self.sessions:
            self.connect(*key)
        pt_session = self.sessions[key]
        dr_session = next(s for s, c in doctor.connections.items() if s == pt_session)
        decline = step.get("decline", False)
        patient.consent = (lambda kind, d: kind != "credential-offer") if decline else (lambda kind, d: True)
        try:
            session = doctor.prescribe(dr_session, step.get("attrs", DEFAULT_ATTRIBUTES), step.get("count", 1))
            self.network.run_until_idle()
        finally:
            patient.consent = lambda kind, d: True
        self.prescriptions[step.get("as", session.offer_id)] = (step["doctor"], session.offer_id)
        token = self.ledger.query_token(session.onboarding.contract_address, session.prescription_key.public_key)
        return {
            "status": session.status,
            "remaining_redemptions": token.remaining_redemptions if token else None,
            "stored": session.offer_id in patient.wallet.credentials,
        }

    def _step_revoke(self, step):
        doc_name, offer_id = self.prescriptions[step["prescription"]]
        epoch = self.doctors[doc_name].revoke(offer_id)
        return {"status": "ok", "epoch": epoch}

    def _prepare_patient(self, patient: Patient, step: dict) -> None:
        label = step.get("prescription")
        patient.selection = self.prescriptions[label][1] if label else None
        patient.disclosure_override = set(step["disclose"]) if "disclose" in step else None
        tamper = step.get("tamper")
        if tamper is None:
            patient.presentation_hook = None
        elif tamper == "change-value":
            def hook(p, name=step.get("attribute", "quantity"), value=step.get("value", "200")):
                for attr in p["disclosed"]:
                    if attr["name"] == name:
                        attr["value"] = value
                return p
            patient.presentation_hook = hook
        elif tamper == "replay":
            previous = canonical_parse(canonical(patient.sent_presentations[-1]))
            patient.presentation_hook = lambda p: previous
        else:
            raise ValueError(f"unknown tamper mode {tamper!r}")

    def _step_redeem(self, step):
        patient = self.patients[step["patient"]]
        pharmacy = self.pharmacies[step["pharmacy"]]
        self._prepare_patient(patient, step)
        before = len(pharmacy.results)
        try:
            self.connect(step["patient"], step["pharmacy"])
        finally:
            patient.presentation_hook = None
            patient.disclosure_override = None
        new = pharmacy.results[before:]
        if not new:
            return {"status": "no-result"}
        return {k: v for k, v in new[-1].to_dict().items() if k != "request_id"}

    def _step_race(self, step):
        """Patient presents the same prescription to several pharmacies before
        any of them has redeemed it."""
        patient = self.patients[step["patient"]]
        self._prepare_patient(patient, step)
        names = step["pharmacies"]
        before = {n: len(self.pharmacies[n].results) for n in names}
        for name in names:
            invitation = self.pharmacies[name].static_invitation()
            conn = patient.accept_invitation(invitation)
            self.sessions[(step["patient"], name)] = conn.session_id
        self.network.run_until_idle()
        outcomes = []
        for name in names:
            new = self.pharmacies[name].results[before[name]:]
            outcomes.extend(r.to_dict() for r in new)
        approved = sum(1 for r in outcomes if r["status"] == "dispense-approved")
        return {
            "approved": approved,
            "rejected": len(outcomes) - approved,
            "reasons": sorted(r.get("reason", "") for r in outcomes if r["status"] != "dispense-approved"),
        }

    def _step_ledger_create(self, step):
        """Raw create transaction signed by any actor's ledger/identity key."""
        actor = self.agent(step["sender"])
        key = getattr(actor, "ledger_key", None) or actor.identity
        contract = self.doctors[step["contract_of"]].onboarding.contract_address
        pk = random.Random(step.get("key_seed", 0)).randbytes(32)
        receipt = self.ledger.send(key, Create(contract, pk, step.get("count", 1)))
        self.events.append({"t": self.network.clock, "actor": step["sender"], "event": "ledger-receipt", "op": "create",
                            **receipt.to_dict()})
        return {"status": receipt.status, "error_code": receipt.error_code, "message": receipt.message}


def _matches(result: dict, expect: dict) -> list[str]:
    problems = []
    for key, want in expect.items():
        got = result.get(key)
        if got != want:
            problems.append(f"{key}: expected {want!r}, got {got!r}")
    return problems


def run_scenario(scenario: Scenario | str | Path, seed: int | None = None) -> RunResult:
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    if seed is not None:
        scenario = Scenario(scenario.name, seed, scenario.actors, scenario.steps, scenario.delivery)
    world = World(scenario)
    steps_out = []
    violations = []
    try:
        for i, step in enumerate(scenario.steps):
            world.events.append({"t": world.network.clock, "event": "step", "index": i, "op": step["op"]})
            result = world.run_step(step)
            problems = _matches(result, step.get("expect", {}))
            violations.extend(f"step {i} ({step['op']}): {p}" for p in problems)
            steps_out.append({"index": i, "op": step["op"], "result": result, "ok": not problems})
        agent_errors = {
            name: [e.code for e in agent.errors]
            for group in (world.doctors, world.patients, world.pharmacies)
            for name, agent in group.items()
            if agent.errors
        }
        ledger_digest = world.ledger.state_digest()
        ledger_height = world.ledger.height
    finally:
        world.close()
    alias = Aliaser()
    transcript = alias(to_jsonable({
        "scenario": scenario.name,
        "delivery": scenario.delivery,
        "events": world.events,
        "steps": steps_out,
        "agent_errors": agent_errors,
        "ledger": {"height": ledger_height, "state_digest": ledger_digest},
        "violations": violations,
    }))
    return RunResult(scenario.name, transcript, violations)
