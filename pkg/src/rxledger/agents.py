"""Doctor, patient-wallet and pharmacy agents.

Every agent is single-threaded over its own state and talks to the others
only through a transport (sealed envelopes) and through the shared registry
and ledger handles.

Connection set-up
-----------------
The inviter (doctor or pharmacy) publishes a signed :class:`Invitation`, the
plaintext "QR payload". It carries an X25519 ephemeral key. The patient picks
a fresh pairwise DID and signing key plus its own ephemeral key and a random
session id. Both sides derive the channel key with HKDF over the X25519
shared secret, salted with the invite nonce and the session id. The ``connect``
message is already sealed under that key and is signed by the patient's
pairwise key. The inviter answers with a sealed ``connect-ack`` signed by its
DID key.

Envelopes are canonical JSON ``{type, session_id, seq, ciphertext}``. The
header is bound as AEAD associated data and ``seq`` must strictly increase
per direction.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .credentials import (
    EPRESCRIPTION_SCHEMA,
    Credential,
    Presentation,
    ProofRequest,
    VerificationPolicy,
    VerificationReport,
    issue,
    make_creddef,
    present,
    revoke,
    verify_presentation,
)
from .crypto_core import (
    KeyPair,
    EphemeralKey,
    b64d,
    b64e,
    canonical,
    canonical_parse,
    check_signature,
    derive_channel_key,
    ephemeral_keypair,
    keygen,
    open_sealed,
    random_keypair,
    seal,
)
from .errors import AgentError, ProtocolError, RxError
from .identity_registry import DidDocument, new_did
from .ledger import ALREADY_SPENT, Create, Deploy, Spend
from .transport import TransportError

MESSAGE_TYPES = (
    "invite",
    "connect",
    "connect-ack",
    "credential-offer",
    "credential-request",
    "credential-issue",
    "proof-request",
    "presentation",
    "redemption-result",
)

REDEMPTION_ATTRIBUTES = ("contract_address", "credential_index", "pharmaceutical", "quantity", "spending_key")

Consent = Callable[[str, dict], "bool | None"]


def auto_accept(kind: str, details: dict) -> bool:
    return True


def _channel_info(inviter_eph: bytes, invitee_eph: bytes) -> bytes:
    return b"rxledger/channel/v1" + inviter_eph + invitee_eph


def _aead_nonce(from_inviter: bool, seq: int) -> bytes:
    return (b"\x00" if from_inviter else b"\x01") + b"\x00" * 3 + seq.to_bytes(8, "big")


def _header(kind: str, session_id: str, seq: int) -> bytes:
    return canonical({"type": kind, "session_id": session_id, "seq": seq})


# -- invitation and connection ---------------------------------------------------


@dataclass(frozen=True)
class Invitation:
    inviter_did: str
    inviter_pk: bytes
    endpoint: str
    invite_nonce: bytes
    ephemeral_pk: bytes
    signature: bytes = field(repr=False)

    def body(self) -> dict:
        return {
            "type": "invite",
            "inviter_did": self.inviter_did,
            "inviter_pk": self.inviter_pk,
            "endpoint": self.endpoint,
            "invite_nonce": self.invite_nonce,
            "ephemeral_pk": self.ephemeral_pk,
        }

    def signature_valid(self) -> bool:
        return check_signature(self.inviter_pk, canonical(self.body()), self.signature)

    def to_bytes(self) -> bytes:
        return canonical({**self.body(), "signature": self.signature})

    @classmethod
    def from_bytes(cls, data: bytes) -> "Invitation":
        d = canonical_parse(data)
        if d.get("type") != "invite":
            raise ProtocolError("bad-invite", "not an invitation")
        return cls(
            d["inviter_did"],
            b64d(d["inviter_pk"]),
            d["endpoint"],
            b64d(d["invite_nonce"]),
            b64d(d["ephemeral_pk"]),
            b64d(d["signature"]),
        )


@dataclass
class Connection:
    session_id: str
    role: str  # "inviter" or "invitee"
    my_did: str
    my_keypair: KeyPair = field(repr=False)
    their_did: str | None
    their_pk: bytes | None
    their_endpoint: str | None
    channel_key: bytes = field(repr=False)
    state: str = "connecting"
    send_seq: int = 0
    recv_seq: int = -1

    def to_dict(self) -> dict:
        """Persistable view; the channel key and private keys are left out."""
        return {
            "session_id": self.session_id,
            "role": self.role,
            "my_did": self.my_did,
            "their_did": self.their_did,
            "their_endpoint": self.their_endpoint,
            "state": self.state,
            "send_seq": self.send_seq,
            "recv_seq": self.recv_seq,
        }


# -- session records -------------------------------------------------------------------


@dataclass(frozen=True)
class Onboarding:
    did: str
    creddef_id: bytes
    contract_address: bytes
    schema_id: bytes


@dataclass
class IssuanceSession:
    offer_id: str
    session_id: str
    onboarding: Onboarding
    credential_index: int
    prescription_key: KeyPair = field(repr=False)
    count: int
    values: dict = field(repr=False)
    status: str = "offered"
    credential: Credential | None = field(default=None, repr=False)


@dataclass
class StoredCredential:
    label: str
    credential: Credential
    holder: KeyPair = field(repr=False)
    issuer_did: str
    status: str = "active"


@dataclass
class PendingOffer:
    offer_id: str
    session_id: str
    body: dict


@dataclass
class PendingRequest:
    request_id: str
    session_id: str
    request: ProofRequest


@dataclass(frozen=True)
class RedemptionResult:
    request_id: str
    status: str
    reason: str | None = None
    remaining_redemptions: int | None = None
    disclosed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"request_id": self.request_id, "status": self.status}
        if self.reason is not None:
            d["reason"] = self.reason
        if self.remaining_redemptions is not None:
            d["remaining_redemptions"] = self.remaining_redemptions
        return d


class WalletStore:
    """Credentials, connections and an append-only activity log."""

    def __init__(self):
        self.credentials: dict[str, StoredCredential] = {}
        self.connections: dict[str, Connection] = {}
        self._activity: list[dict] = []

    def log(self, event: str, **details) -> None:
        self._activity.append({"event": event, **details})

    @property
    def activity(self) -> tuple[dict, ...]:
        return tuple(self._activity)


# -- base agent ------------------------------------------------------------------------


class Agent:
    role = "agent"

    def __init__(self, name: str, transport, registry, rng: random.Random, observer=None):
        self.name = name
        self.transport = transport
        self.registry = registry
        self.rng = rng
        self.observer = observer
        self.connections: dict[str, Connection] = {}
        self.errors: list[RxError] = []
        self.endpoint = transport.register(name, self.receive)

    def emit(self, kind: str, **data) -> None:
        if self.observer is not None:
            self.observer(self.name, kind, data)

    # -- wire ---------------------------------------------------------------------

    def _send(self, conn: Connection, kind: str, body: dict, **extra) -> None:
        seq = conn.send_seq
        conn.send_seq += 1
        nonce = _aead_nonce(conn.role == "inviter", seq)
        ciphertext = seal(conn.channel_key, canonical(body), nonce, _header(kind, conn.session_id, seq))
        envelope = {"type": kind, "session_id": conn.session_id, "seq": seq, "ciphertext": ciphertext, **extra}
        self.emit("send", type=kind, session_id=conn.session_id, seq=seq, to=conn.their_did)
        self.transport.send(conn.their_endpoint, canonical(envelope))

    def receive(self, data: bytes) -> None:
        try:
            self._receive(data)
        except RxError as exc:
            self.errors.append(exc)
            self.emit("rejected", code=exc.code, message=str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            err = ProtocolError("malformed", f"malformed message: {exc}")
            self.errors.append(err)
            self.emit("rejected", code=err.code, message=str(err))

    def _receive(self, data: bytes) -> None:
        env = canonical_parse(data)
        kind = env["type"]
        if kind not in MESSAGE_TYPES or kind == "invite":
            raise ProtocolError("bad-type", f"unexpected envelope type {kind!r}")
        if kind == "connect":
            self._on_connect(env)
            return
        conn = self.connections.get(env["session_id"])
        if conn is None:
            raise ProtocolError("unknown-session", "message for an unknown session")
        seq = env["seq"]
        if type(seq) is not int or seq <= conn.recv_seq:
            raise ProtocolError("replay", f"sequence number {seq} not above {conn.recv_seq}")
        nonce = _aead_nonce(conn.role != "inviter", seq)
        plaintext = open_sealed(conn.channel_key, b64d(env["ciphertext"]), nonce, _header(kind, conn.session_id, seq))
        conn.recv_seq = seq
        body = canonical_parse(plaintext)
        self.emit("receive", type=kind, session_id=conn.session_id, seq=seq)
        if kind == "connect-ack":
            self._on_connect_ack(conn, body)
            return
        if conn.state != "active":
            raise ProtocolError("not-connected", f"{kind} before the connection is established")
        handler = getattr(self, "_on_" + kind.replace("-", "_"), None)
        if handler is None:
            raise ProtocolError("bad-type", f"a {self.role} does not accept {kind}")
        handler(conn, body)

    def _on_connect(self, env: dict) -> None:
        raise ProtocolError("bad-type", f"a {self.role} does not accept connections")

    def _on_connect_ack(self, conn: Connection, body: dict) -> None:
        raise ProtocolError("bad-type", f"a {self.role} does not expect connect-ack")

    def connection(self, session_id: str) -> Connection:
        conn = self.connections.get(session_id)
        if conn is None or conn.state != "active":
            raise AgentError("no-connection", f"no active connection {session_id}")
        return conn


class PublicAgent(Agent):
    """Doctor or pharmacy: registers a public DID and issues invitations."""

    def __init__(self, name, transport, registry, rng, observer=None):
        super().__init__(name, transport, registry, rng, observer)
        self.identity = random_keypair(rng)
        self.did: str | None = None
        self._invites: dict[bytes, EphemeralKey] = {}

    def register_did(self) -> str:
        did = new_did(self.rng)
        doc = DidDocument(did, self.identity.public_key, self.endpoint, self.role)
        self.registry.register_did(doc, self.identity.sign(doc.signing_bytes()))
        self.did = did
        return did

    def invite(self) -> Invitation:
        if self.did is None:
            raise AgentError("not-onboarded", f"{self.name} has no public DID yet")
        nonce = self.rng.randbytes(16)
        eph = ephemeral_keypair(self.rng)
        self._invites[nonce] = eph
        unsigned = Invitation(self.did, self.identity.public_key, self.endpoint, nonce, eph.public_key, b"")
        invitation = replace(unsigned, signature=self.identity.sign(canonical(unsigned.body())))
        self.emit("invite", did=self.did)
        return invitation

    def _on_connect(self, env: dict) -> None:
        nonce = b64d(env["invite_nonce"])
        eph = self._invites.get(nonce)
        if eph is None:
            raise ProtocolError("unknown-invite", "connect for an unknown invitation")
        session_id = env["session_id"]
        if session_id in self.connections:
            raise ProtocolError("replay", "session already exists")
        if env["seq"] != 0:
            raise ProtocolError("replay", "connect must be the first message")
        their_eph = b64d(env["ephemeral_pk"])
        key = derive_channel_key(eph, their_eph, nonce + b64d(session_id), _channel_info(eph.public_key, their_eph))
        plaintext = open_sealed(key, b64d(env["ciphertext"]), _aead_nonce(False, 0), _header("connect", session_id, 0))
        body = canonical_parse(plaintext)
        their_pk = b64d(body["verification_key"])
        transcript = canonical([nonce, session_id, eph.public_key, their_eph])
        if not check_signature(their_pk, transcript, b64d(body["signature"])):
            raise ProtocolError("bad-handshake", "connect signature does not verify")
        conn = Connection(session_id, "inviter", self.did, self.identity, body["did"], their_pk, body["endpoint"], key, "active", 0, 0)
        self.connections[session_id] = conn
        ack = canonical(["ack", nonce, session_id, their_eph, their_pk])
        self._send(conn, "connect-ack", {"did": self.did, "signature": self.identity.sign(ack)})
        self.emit("connected", session_id=session_id, their_did=conn.their_did)
        self._connected(conn)

    def _connected(self, conn: Connection) -> None:
        pass


# -- doctor ------------------------------------------------------------------------------


class Doctor(PublicAgent):
    role = "doctor"

    def __init__(self, name, transport, registry, ledger, rng, schema=EPRESCRIPTION_SCHEMA, observer=None):
        super().__init__(name, transport, registry, rng, observer)
        self.ledger = ledger
        self.schema = schema
        self.ledger_key = random_keypair(rng)
        self.onboardings: list[Onboarding] = []
        self.sessions: dict[str, IssuanceSession] = {}
        self._next_index: dict[bytes, int] = {}

    @property
    def onboarding(self) -> Onboarding:
        if not self.onboardings:
            raise AgentError("not-onboarded", f"{self.name} is not onboarded")
        return self.onboardings[-1]

    def onboard(self) -> Onboarding:
        """Register a fresh DID, the schema and a credential definition, then
        deploy a token contract. Agent state only changes once every step
        has succeeded."""
        try:
            self.registry.ping()
            did = new_did(self.rng)
            doc = DidDocument(did, self.identity.public_key, self.endpoint, self.role)
            self.registry.register_did(doc, self.identity.sign(doc.signing_bytes()))
            schema_id = self.registry.register_schema(self.schema)
            creddef, proof, genesis = make_creddef(self.identity, did, self.schema)
            creddef_id = self.registry.register_creddef(creddef, proof, genesis)
        except RxError as exc:
            raise AgentError("onboarding-failed", f"registry: {exc}") from exc
        receipt = self.ledger.send(self.ledger_key, Deploy())
        if not receipt.ok:
            raise AgentError("onboarding-failed", f"deploy rejected: {receipt.message}")
        result = Onboarding(did, creddef_id, receipt.contract_address, schema_id)
        self.did = did
        self.onboardings.append(result)
        self.emit("onboarded", did=did, creddef_id=creddef_id, contract_address=receipt.contract_address)
        return result

    def prescribe(self, session_id: str, attributes: dict, count: int = 1) -> IssuanceSession:
        conn = self.connection(session_id)
        if type(count) is not int or count < 1:
            raise AgentError("bad-count", "a prescription needs at least one redemption")
        onboarding = self.onboarding
        prescription_key = random_keypair(self.rng)
        receipt = self.ledger.send(self.ledger_key, Create(onboarding.contract_address, prescription_key.public_key, count))
        self.emit("ledger-receipt", op="create", **receipt.to_dict())
        if not receipt.ok:
            raise AgentError("ledger-rejected", receipt.message)
        index = self._next_index.get(onboarding.creddef_id, 0)
        self._next_index[onboarding.creddef_id] = index + 1
        values = {
            **attributes,
            "contract_address": b64e(onboarding.contract_address),
            "spending_key": b64e(prescription_key.secret_key),
            "credential_index": index,
        }
        offer_id = b64e(self.rng.randbytes(16))
        session = IssuanceSession(offer_id, session_id, onboarding, index, prescription_key, count, values)
        self.sessions[offer_id] = session
        preview = {k: v for k, v in values.items() if k not in ("spending_key",)}
        body = {
            "offer_id": offer_id,
            "creddef_id": onboarding.creddef_id,
            "schema_id": onboarding.schema_id,
            "preview": preview,
            "count": count,
        }
        try:
            self._send(conn, "credential-offer", body)
        except TransportError as exc:
            session.status = "failed"
            self.revoke(offer_id)
            raise AgentError("delivery-failed", str(exc)) from exc
        return session

    def _on_credential_request(self, conn: Connection, body: dict) -> None:
        session = self.sessions.get(body["offer_id"])
        if session is None or session.session_id != conn.session_id or session.status != "offered":
            raise ProtocolError("out-of-order", "credential-request without a matching open offer")
        if body["decision"] != "accept":
            session.status = "declined"
            self.emit("offer-declined", offer_id=session.offer_id)
            return
        holder_pk = b64d(body["holder_binding_pk"])
        if not check_signature(holder_pk, canonical(["credential-request", session.offer_id, holder_pk]), b64d(body["holder_proof"])):
            raise ProtocolError("bad-request", "holder did not prove possession of the binding key")
        schema = self.registry.get_schema(session.onboarding.schema_id)
        creddef = self.registry.get_creddef(session.onboarding.creddef_id)
        credential = issue(self.identity, creddef, schema, session.values, holder_pk, session.credential_index, self.rng)
        session.credential = credential
        try:
            self._send(conn, "credential-issue", {"offer_id": session.offer_id, "credential": credential.to_dict()})
        except TransportError:
            session.status = "failed"
            self.revoke(session.offer_id)
            raise
        session.status = "issued"
        self.emit("credential-issued", offer_id=session.offer_id, credential_index=session.credential_index)

    def revoke(self, offer_id: str) -> int:
        session = self.sessions[offer_id]
        epoch = revoke(self.identity, self.registry, session.onboarding.creddef_id, session.credential_index)
        self.emit("revoked", offer_id=offer_id, credential_index=session.credential_index, epoch=epoch)
        return epoch


# -- patient --------------------------------------------------------------------------------


class Patient(Agent):
    role = "patient"

    def __init__(self, name, transport, registry, rng, consent: Consent = auto_accept, observer=None):
        super().__init__(name, transport, registry, rng, observer)
        self.consent = consent
        self.wallet = WalletStore()
        self.connections = self.wallet.connections
        self.pending_offers: dict[str, PendingOffer] = {}
        self.pending_requests: dict[str, PendingRequest] = {}
        self._requested: dict[str, PendingOffer] = {}
        self._holder_keys: dict[str, KeyPair] = {}
        self.selection: str | None = None
        self.disclosure_override: set[str] | None = None
        self.presentation_hook: Callable[[dict], dict] | None = None
        self.sent_presentations: list[dict] = []
        self.results: list[dict] = []
        self._pending_handshakes: dict[str, tuple] = {}

    def accept_invitation(self, invitation: Invitation | bytes) -> Connection:
        if isinstance(invitation, (bytes, bytearray)):
            invitation = Invitation.from_bytes(bytes(invitation))
        if not invitation.signature_valid():
            raise AgentError("bad-invite", "invitation signature does not verify")
        doc = self.registry.resolve_did(invitation.inviter_did)
        if doc.verification_key != invitation.inviter_pk:
            raise AgentError("bad-invite", "inviter key does not match its public DID")
        my_did = new_did(self.rng)
        my_key = random_keypair(self.rng)
        eph = ephemeral_keypair(self.rng)
        session_id = b64e(self.rng.randbytes(16))
        salt = invitation.invite_nonce + b64d(session_id)
        key = derive_channel_key(eph, invitation.ephemeral_pk, salt, _channel_info(invitation.ephemeral_pk, eph.public_key))
        conn = Connection(session_id, "invitee", my_did, my_key, invitation.inviter_did, invitation.inviter_pk,
                          invitation.endpoint, key)
        transcript = canonical([invitation.invite_nonce, session_id, invitation.ephemeral_pk, eph.public_key])
        body = {"did": my_did, "verification_key": my_key.public_key, "endpoint": self.endpoint,
                "signature": my_key.sign(transcript)}
        self.connections[session_id] = conn
        self._pending_handshakes[session_id] = (invitation.invite_nonce, eph.public_key)
        self.wallet.log("connection-requested", with_did=invitation.inviter_did, my_did=my_did)
        self._send(conn, "connect", body, ephemeral_pk=eph.public_key, invite_nonce=invitation.invite_nonce)
        return conn

    def _on_connect_ack(self, conn: Connection, body: dict) -> None:
        handshake = self._pending_handshakes.pop(conn.session_id, None)
        if conn.state != "connecting" or handshake is None:
            raise ProtocolError("out-of-order", "connect-ack on an established connection")
        nonce, my_eph = handshake
        ack = canonical(["ack", nonce, conn.session_id, my_eph, conn.my_keypair.public_key])
        if body["did"] != conn.their_did or not check_signature(conn.their_pk, ack, b64d(body["signature"])):
            raise ProtocolError("bad-handshake", "connect-ack signature does not verify")
        conn.state = "active"
        self.wallet.log("connection-established", with_did=conn.their_did, my_did=conn.my_did)
        self.emit("connected", session_id=conn.session_id, their_did=conn.their_did)

    # -- issuance --------------------------------------------------------------------

    def _on_credential_offer(self, conn: Connection, body: dict) -> None:
        offer = PendingOffer(body["offer_id"], conn.session_id, body)
        if offer.offer_id in self.pending_offers or offer.offer_id in self._requested:
            raise ProtocolError("replay", "duplicate offer")
        self.pending_offers[offer.offer_id] = offer
        decision = self.consent("credential-offer", {"from": conn.their_did, **body})
        if decision is True:
            self.accept_offer(offer.offer_id)
        elif decision is False:
            self.decline_offer(offer.offer_id)

    def accept_offer(self, offer_id: str) -> None:
        offer = self.pending_offers.pop(offer_id)
        conn = self.connection(offer.session_id)
        holder = random_keypair(self.rng)
        self._holder_keys[offer_id] = holder
        self._requested[offer_id] = offer
        proof = holder.sign(canonical(["credential-request", offer_id, holder.public_key]))
        self.wallet.log("offer-accepted", offer_id=offer_id, with_did=conn.their_did)
        self._send(conn, "credential-request", {
            "offer_id": offer_id, "decision": "accept", "holder_binding_pk": holder.public_key, "holder_proof": proof,
        })

    def decline_offer(self, offer_id: str) -> None:
        offer = self.pending_offers.pop(offer_id)
        conn = self.connection(offer.session_id)
        self.wallet.log("offer-declined", offer_id=offer_id, with_did=conn.their_did)
        self._send(conn, "credential-request", {"offer_id": offer_id, "decision": "decline"})

    def _on_credential_issue(self, conn: Connection, body: dict) -> None:
        offer = self._requested.get(body["offer_id"])
        if offer is None or offer.session_id != conn.session_id:
            raise ProtocolError("out-of-order", "credential-issue without an accepted offer")
        credential = Credential.from_dict(body["credential"])
        creddef = self.registry.get_creddef(credential.creddef_id)
        schema = self.registry.get_schema(creddef.schema_id)
        holder = self._holder_keys[offer.offer_id]
        if (creddef.issuer_did != conn.their_did or credential.holder_binding_pk != holder.public_key
                or not credential.verify(creddef, schema)):
            raise ProtocolError("bad-credential", "issued credential does not verify")
        del self._requested[offer.offer_id]
        self.wallet.credentials[offer.offer_id] = StoredCredential(offer.offer_id, credential, holder, creddef.issuer_did)
        self.wallet.log("credential-stored", label=offer.offer_id, with_did=conn.their_did)
        self.emit("credential-stored", label=offer.offer_id)

    # -- presentation ----------------------------------------------------------------------

    def _on_proof_request(self, conn: Connection, body: dict) -> None:
        request = ProofRequest.from_dict(body["request"])
        pending = PendingRequest(body["request_id"], conn.session_id, request)
        if pending.request_id in self.pending_requests:
            raise ProtocolError("replay", "duplicate proof request")
        self.pending_requests[pending.request_id] = pending
        decision = self.consent("proof-request", {"from": conn.their_did, **body})
        if decision is True:
            try:
                self.respond(pending.request_id)
            except AgentError as exc:
                self._send_decline(pending, exc.code)
        elif decision is False:
            self._send_decline(pending, "user-declined")

    def _send_decline(self, pending: PendingRequest, reason: str) -> None:
        self.pending_requests.pop(pending.request_id, None)
        conn = self.connection(pending.session_id)
        self.wallet.log("proof-declined", request_id=pending.request_id, reason=reason, with_did=conn.their_did)
        self._send(conn, "presentation", {"request_id": pending.request_id, "declined": reason})

    def decline_request(self, request_id: str) -> None:
        self._send_decline(self.pending_requests[request_id], "user-declined")

    def choose_credential(self, request: ProofRequest) -> StoredCredential:
        if self.selection is not None:
            stored = self.wallet.credentials.get(self.selection)
            if stored is None:
                raise AgentError("no-matching-credential", f"no credential {self.selection}")
            return stored
        for stored in self.wallet.credentials.values():
            names = {a.name for a in stored.credential.attributes}
            if stored.status != "active" or not request.requested_attribute_names <= names:
                continue
            if request.accepted_creddef_ids and stored.credential.creddef_id not in request.accepted_creddef_ids:
                continue
            return stored
        raise AgentError("no-matching-credential", "no stored credential satisfies the request")

    def respond(self, request_id: str, label: str | None = None, disclose=None) -> Presentation:
        pending = self.pending_requests[request_id]
        conn = self.connection(pending.session_id)
        stored = self.wallet.credentials.get(label) if label else self.choose_credential(pending.request)
        if stored is None:
            raise AgentError("no-matching-credential", f"no credential {label}")
        request = pending.request
        disclose = disclose if disclose is not None else self.disclosure_override
        if disclose is not None:
            request = ProofRequest(frozenset(disclose), request.channel_nonce, request.accepted_creddef_ids,
                                   request.require_non_revocation)
        presentation = present(stored.credential, stored.holder, request)
        payload = presentation.to_dict()
        if self.presentation_hook is not None:
            payload = self.presentation_hook(payload)
        del self.pending_requests[request_id]
        self.sent_presentations.append(payload)
        self.wallet.log("attributes-shared", label=stored.label, with_did=conn.their_did,
                        attributes=[a.name for a in presentation.disclosed])
        self._send(conn, "presentation", {"request_id": request_id, "presentation": payload})
        return presentation

    def _on_redemption_result(self, conn: Connection, body: dict) -> None:
        self.results.append(body)
        self.wallet.log("redemption-result", with_did=conn.their_did, status=body["status"])
        self.emit("redemption-result", **body)


# -- pharmacy -----------------------------------------------------------------------------------


class Pharmacy(PublicAgent):
    role = "pharmacy"

    def __init__(self, name, transport, registry, ledger, rng, trusted_issuer_dids=(), request_patient_name=False,
                 auto_request=True, records_path: str | Path | None = None, min_epoch: int | None = None,
                 observer=None):
        super().__init__(name, transport, registry, rng, observer)
        self.ledger = ledger
        self.trusted_issuer_dids = set(trusted_issuer_dids)
        self.request_patient_name = request_patient_name
        self.auto_request = auto_request
        self.min_epoch = min_epoch
        self.records_path = Path(records_path) if records_path is not None else None
        self.open_requests: dict[str, PendingRequest] = {}
        self.results: list[RedemptionResult] = []
        self.reports: list[VerificationReport] = []
        self._static_invite: Invitation | None = None

    def onboard(self) -> str:
        return self.register_did()

    def static_invitation(self) -> Invitation:
        if self._static_invite is None:
            self._static_invite = self.invite()
        return self._static_invite

    def trust(self, did: str) -> None:
        self.trusted_issuer_dids.add(did)

    def _connected(self, conn: Connection) -> None:
        if self.auto_request:
            self.request_redemption(conn.session_id)

    def request_redemption(self, session_id: str) -> ProofRequest:
        conn = self.connection(session_id)
        names = set(REDEMPTION_ATTRIBUTES)
        if self.request_patient_name:
            names.add("patient_name")
        request = ProofRequest.new(names, self.rng, require_non_revocation=True)
        request_id = b64e(self.rng.randbytes(16))
        self.open_requests[request_id] = PendingRequest(request_id, session_id, request)
        self._send(conn, "proof-request", {"request_id": request_id, "request": request.to_dict()})
        return request

    def _on_presentation(self, conn: Connection, body: dict) -> None:
        pending = self.open_requests.get(body["request_id"])
        if pending is None or pending.session_id != conn.session_id:
            raise ProtocolError("out-of-order", "presentation without an open proof request")
        del self.open_requests[pending.request_id]
        if "declined" in body:
            result = self._record(RedemptionResult(pending.request_id, "declined", body["declined"]))
        else:
            result = self.redeem(canonical(body["presentation"]), pending.request, pending.request_id)
        self._send(conn, "redemption-result", result.to_dict())

    def redeem(self, presentation: Presentation | bytes, request: ProofRequest, request_id: str = "") -> RedemptionResult:
        policy = VerificationPolicy.for_request(request, self.trusted_issuer_dids, self.min_epoch)
        report = verify_presentation(presentation, self.registry, policy)
        self.reports.append(report)
        self.emit("verification", **report.to_dict())
        if not report.valid:
            return self._record(RedemptionResult(request_id, "dispense-rejected", report.failure_reason))
        disclosed = report.disclosed
        missing = [n for n in request.requested_attribute_names if n not in disclosed]
        if missing:
            reason = "missing-spending-key" if "spending_key" in missing else "missing-attribute"
            return self._record(RedemptionResult(request_id, "dispense-rejected", reason, disclosed=disclosed))
        try:
            spender = keygen(b64d(disclosed["spending_key"]))
            contract = b64d(disclosed["contract_address"])
        except (RxError, TypeError):
            return self._record(RedemptionResult(request_id, "dispense-rejected", "bad-spending-key", disclosed=disclosed))
        receipt = self.ledger.send(spender, Spend(contract))
        self.emit("ledger-receipt", op="spend", **receipt.to_dict())
        if receipt.ok:
            result = RedemptionResult(request_id, "dispense-approved", None, receipt.remaining_redemptions, disclosed)
        elif receipt.message == ALREADY_SPENT:
            result = RedemptionResult(request_id, "dispense-rejected", "double-spend", 0, disclosed)
        else:
            result = RedemptionResult(request_id, "dispense-rejected", receipt.error_code, disclosed=disclosed)
        return self._record(result)

    def _record(self, result: RedemptionResult) -> RedemptionResult:
        self.results.append(result)
        self.emit("redemption", **result.to_dict())
        if self.records_path is not None:
            record = {**result.to_dict(), "pharmacy_did": self.did,
                      "pharmaceutical": result.disclosed.get("pharmaceutical"),
                      "quantity": result.disclosed.get("quantity")}
            with open(self.records_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return result
