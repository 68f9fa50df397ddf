"""Verifiable data registry: public DIDs, credential schemas, credential
definitions and versioned revocation registries.

The store is append-only. Every accepted write becomes a record
``{seq, kind, body, signature?}`` whose canonical bytes never change, and
which can optionally be mirrored to a newline-delimited log file and replayed
from it on startup.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .crypto_core import (
    Digest,
    KeyPair,
    b64d,
    b64e,
    canonical,
    canonical_parse,
    check_signature,
    hash_canonical,
)
from .errors import InvalidEncoding, RegistryError, RegistryUnavailable

DID_METHOD = "rx"
PUBLIC_ROLES = ("doctor", "pharmacy")
ROLES = ("doctor", "pharmacy", "patient")
RECORD_KINDS = ("did", "schema", "creddef", "revocation")


def new_did(rng: random.Random) -> str:
    return f"did:{DID_METHOD}:{b64e(rng.randbytes(16))}"


def is_did(text: str) -> bool:
    prefix = f"did:{DID_METHOD}:"
    if not isinstance(text, str) or not text.startswith(prefix):
        return False
    try:
        return len(b64d(text[len(prefix):])) == 16
    except InvalidEncoding:
        return False


@dataclass(frozen=True)
class DidDocument:
    did: str
    verification_key: bytes
    service_endpoint: str
    role: str

    def to_dict(self) -> dict:
        return {
            "did": self.did,
            "verification_key": self.verification_key,
            "service_endpoint": self.service_endpoint,
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DidDocument":
        return cls(d["did"], b64d(d["verification_key"]), d["service_endpoint"], d["role"])

    def signing_bytes(self) -> bytes:
        return canonical(self.to_dict())


@dataclass(frozen=True)
class CredentialSchema:
    name: str
    version: str
    attribute_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.attribute_names)
        if not names:
            raise RegistryError("bad-schema", "schema needs at least one attribute")
        if len(set(names)) != len(names) or list(names) != sorted(names):
            raise RegistryError("bad-schema", "attribute names must be unique and sorted")
        object.__setattr__(self, "attribute_names", names)

    def to_dict(self) -> dict:
        return {"name": self.name, "version": self.version, "attribute_names": list(self.attribute_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "CredentialSchema":
        return cls(d["name"], d["version"], tuple(d["attribute_names"]))

    @property
    def schema_id(self) -> Digest:
        return hash_canonical(self.to_dict())


def revocation_registry_id(issuer_did: str, schema_id: Digest) -> Digest:
    return hash_canonical({"kind": "revocation", "issuer_did": issuer_did, "schema_id": schema_id})


@dataclass(frozen=True)
class CredentialDefinition:
    schema_id: Digest
    issuer_did: str
    issuer_signing_key: bytes
    revocation_registry_id: Digest

    @classmethod
    def for_issuer(cls, schema_id: Digest, issuer_did: str, issuer_signing_key: bytes) -> "CredentialDefinition":
        return cls(schema_id, issuer_did, issuer_signing_key, revocation_registry_id(issuer_did, schema_id))

    def to_dict(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "issuer_did": self.issuer_did,
            "issuer_signing_key": self.issuer_signing_key,
            "revocation_registry_id": self.revocation_registry_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CredentialDefinition":
        return cls(b64d(d["schema_id"]), d["issuer_did"], b64d(d["issuer_signing_key"]), b64d(d["revocation_registry_id"]))

    @property
    def creddef_id(self) -> Digest:
        return hash_canonical(self.to_dict())


def encode_bitmap(indices: Iterable[int]) -> bytes:
    """Bit ``i`` lives in byte ``i // 8`` at position ``i % 8`` (LSB first).
    Trailing zero bytes are dropped so each index set has one encoding."""
    indices = list(indices)
    if not indices:
        return b""
    if min(indices) < 0:
        raise RegistryError("bad-index", "credential indices are non-negative")
    buf = bytearray(max(indices) // 8 + 1)
    for i in indices:
        buf[i // 8] |= 1 << (i % 8)
    return bytes(buf)


def decode_bitmap(bitmap: bytes) -> frozenset[int]:
    if bitmap and bitmap[-1] == 0:
        raise RegistryError("bad-bitmap", "bitmap has trailing zero bytes")
    return frozenset(i * 8 + b for i, byte in enumerate(bitmap) for b in range(8) if byte >> b & 1)


def revocation_signing_bytes(registry_id: Digest, epoch: int, revoked: Iterable[int]) -> bytes:
    return canonical({"registry_id": registry_id, "epoch": epoch, "revoked": encode_bitmap(revoked)})


def sign_revocation_state(issuer: KeyPair, registry_id: Digest, epoch: int, revoked: Iterable[int]) -> bytes:
    return issuer.sign(revocation_signing_bytes(registry_id, epoch, revoked))


@dataclass(frozen=True)
class RevocationRegistry:
    registry_id: Digest
    creddef_id: Digest
    epoch: int
    revoked: frozenset[int]
    issuer_signature: bytes

    def is_revoked(self, index: int) -> bool:
        return index in self.revoked

    def signing_bytes(self) -> bytes:
        return revocation_signing_bytes(self.registry_id, self.epoch, self.revoked)

    def to_dict(self) -> dict:
        return {
            "registry_id": self.registry_id,
            "creddef_id": self.creddef_id,
            "epoch": self.epoch,
            "revoked": encode_bitmap(self.revoked),
        }

    @classmethod
    def from_dict(cls, d: dict, signature: bytes) -> "RevocationRegistry":
        return cls(
            b64d(d["registry_id"]),
            b64d(d["creddef_id"]),
            d["epoch"],
            decode_bitmap(b64d(d["revoked"])),
            signature,
        )


@dataclass(frozen=True)
class NonRevocation:
    epoch: int
    non_revoked: bool


@dataclass(frozen=True)
class Record:
    seq: int
    kind: str
    body: dict
    signature: bytes | None = None

    def to_dict(self) -> dict:
        d = {"seq": self.seq, "kind": self.kind, "body": self.body}
        if self.signature is not None:
            d["signature"] = self.signature
        return d

    def to_bytes(self) -> bytes:
        return canonical(self.to_dict())


@dataclass(frozen=True)
class GenesisRevocation:
    """Signed empty revocation state that accompanies a new credential definition."""

    signature: bytes


class Registry:
    """In-process verifiable data registry.

    Writes go through one lock and are validated before they are appended.
    Reads return frozen objects and never block on writers.
    """

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._records: list[Record] = []
        self._raw: list[bytes] = []
        self._dids: dict[str, DidDocument] = {}
        self._schemas: dict[Digest, CredentialSchema] = {}
        self._creddefs: dict[Digest, CredentialDefinition] = {}
        self._active: dict[tuple[str, Digest], Digest] = {}
        self._revocations: dict[Digest, list[RevocationRegistry]] = {}
        self._path = Path(path) if path is not None else None
        self._file = None
        if self._path is not None:
            if self._path.exists():
                self._load(self._path)
            self._file = open(self._path, "ab")

    # -- persistence -----------------------------------------------------------

    def _load(self, path: Path) -> None:
        for line in path.read_bytes().splitlines():
            if not line:
                continue
            d = canonical_parse(line)
            sig = b64d(d["signature"]) if "signature" in d else None
            if d["seq"] != len(self._records):
                raise RegistryError("corrupt-log", f"expected seq {len(self._records)}, got {d['seq']}")
            self._replay(d["kind"], d["body"], sig)

    def _replay(self, kind: str, body: dict, sig: bytes | None) -> None:
        if kind == "did":
            self._add_did(DidDocument.from_dict(body), sig)
        elif kind == "schema":
            self._add_schema(CredentialSchema.from_dict(body))
        elif kind == "creddef":
            genesis = b64d(body["genesis_revocation_signature"])
            creddef = CredentialDefinition.from_dict(body["creddef"])
            self._add_creddef(creddef, sig, genesis)
        elif kind == "revocation":
            state = RevocationRegistry.from_dict(body, sig)
            self._add_revocation(state)
        else:
            raise RegistryError("corrupt-log", f"unknown record kind {kind!r}")

    def _append(self, kind: str, body: dict, signature: bytes | None) -> Record:
        record = Record(len(self._records), kind, canonical_parse(canonical(body)), signature)
        raw = record.to_bytes()
        self._records.append(record)
        self._raw.append(raw)
        if self._file is not None:
            self._file.write(raw + b"\n")
            self._file.flush()
        return record

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    # -- DIDs --------------------------------------------------------------------

    def register_did(self, doc: DidDocument, proof: bytes) -> str:
        with self._lock:
            return self._add_did(doc, proof)

    def _add_did(self, doc: DidDocument, proof: bytes) -> str:
        if doc.role not in PUBLIC_ROLES:
            raise RegistryError("not-public", f"role {doc.role!r} may not register publicly")
        if not is_did(doc.did):
            raise RegistryError("bad-did", f"malformed DID {doc.did!r}")
        if doc.did in self._dids:
            raise RegistryError("duplicate-did", f"{doc.did} already registered")
        if not check_signature(doc.verification_key, doc.signing_bytes(), proof):
            raise RegistryError("bad-proof", "DID document not signed by its verification key")
        self._append("did", doc.to_dict(), proof)
        self._dids[doc.did] = doc
        return doc.did

    def resolve_did(self, did: str) -> DidDocument:
        try:
            return self._dids[did]
        except KeyError:
            raise RegistryError("not-found", f"unknown DID {did}") from None

    # -- schemas and credential definitions -----------------------------------

    def register_schema(self, schema: CredentialSchema) -> Digest:
        with self._lock:
            return self._add_schema(schema)

    def _add_schema(self, schema: CredentialSchema) -> Digest:
        schema_id = schema.schema_id
        if schema_id not in self._schemas:
            self._append("schema", schema.to_dict(), None)
            self._schemas[schema_id] = schema
        return schema_id

    def get_schema(self, schema_id: Digest) -> CredentialSchema:
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise RegistryError("not-found", "unknown schema") from None

    def register_creddef(self, creddef: CredentialDefinition, proof: bytes, genesis: GenesisRevocation) -> Digest:
        """Register a credential definition together with its empty revocation
        registry at epoch 0. ``proof`` signs the creddef body and ``genesis``
        signs the empty revocation state, both with the issuer key."""
        with self._lock:
            return self._add_creddef(creddef, proof, genesis.signature)

    def _add_creddef(self, creddef: CredentialDefinition, proof: bytes, genesis_sig: bytes) -> Digest:
        doc = self._dids.get(creddef.issuer_did)
        if doc is None or doc.role != "doctor":
            raise RegistryError("unknown-issuer", f"{creddef.issuer_did} is not a registered doctor")
        if creddef.schema_id not in self._schemas:
            raise RegistryError("unknown-schema", "credential definition references an unknown schema")
        if creddef.issuer_signing_key != doc.verification_key:
            raise RegistryError("bad-proof", "signing key differs from the issuer's DID key")
        if creddef.revocation_registry_id != revocation_registry_id(creddef.issuer_did, creddef.schema_id):
            raise RegistryError("bad-creddef", "revocation registry id does not match issuer and schema")
        creddef_id = creddef.creddef_id
        if creddef_id in self._creddefs or (creddef.issuer_did, creddef.schema_id) in self._active:
            raise RegistryError("duplicate", "issuer already has a credential definition for this schema")
        if not check_signature(creddef.issuer_signing_key, canonical(creddef.to_dict()), proof):
            raise RegistryError("bad-proof", "credential definition not signed by the issuer")
        genesis = RevocationRegistry(creddef.revocation_registry_id, creddef_id, 0, frozenset(), genesis_sig)
        if not check_signature(creddef.issuer_signing_key, genesis.signing_bytes(), genesis_sig):
            raise RegistryError("bad-signature", "genesis revocation state not signed by the issuer")
        self._append("creddef", {"creddef": creddef.to_dict(), "genesis_revocation_signature": genesis_sig}, proof)
        self._creddefs[creddef_id] = creddef
        self._active[(creddef.issuer_did, creddef.schema_id)] = creddef_id
        self._revocations[creddef_id] = [genesis]
        return creddef_id

    def get_creddef(self, creddef_id: Digest) -> CredentialDefinition:
        try:
            return self._creddefs[creddef_id]
        except KeyError:
            raise RegistryError("not-found", "unknown credential definition") from None

    # -- revocation ----------------------------------------------------------------

    def publish_revocation(
        self, creddef_id: Digest, new_epoch: int, revoked: Iterable[int], signature: bytes
    ) -> RevocationRegistry:
        """Advance the revocation registry of ``creddef_id`` by one epoch.

        ``revoked`` is the full revoked index set after the update; it must
        contain every index revoked so far.
        """
        with self._lock:
            history = self._revocations.get(creddef_id)
            if history is None:
                raise RegistryError("unknown-registry", "no revocation registry for this credential definition")
            head = history[-1]
            state = RevocationRegistry(head.registry_id, creddef_id, new_epoch, frozenset(revoked), signature)
            return self._add_revocation(state)

    def _add_revocation(self, state: RevocationRegistry) -> RevocationRegistry:
        history = self._revocations.get(state.creddef_id)
        if history is None:
            raise RegistryError("unknown-registry", "no revocation registry for this credential definition")
        head = history[-1]
        if state.epoch != head.epoch + 1:
            raise RegistryError("stale-epoch", f"expected epoch {head.epoch + 1}, got {state.epoch}")
        if not head.revoked <= state.revoked:
            raise RegistryError("bit-clearing", "revocation is irreversible")
        if state.registry_id != head.registry_id:
            raise RegistryError("unknown-registry", "registry id mismatch")
        key = self._creddefs[state.creddef_id].issuer_signing_key
        if not check_signature(key, state.signing_bytes(), state.issuer_signature):
            raise RegistryError("bad-signature", "revocation state not signed by the issuer")
        self._append("revocation", state.to_dict(), state.issuer_signature)
        history.append(state)
        return state

    def revocation_state(self, creddef_id: Digest, epoch: int | None = None) -> RevocationRegistry:
        history = self._revocations.get(creddef_id)
        if history is None:
            raise RegistryError("unknown-registry", "no revocation registry for this credential definition")
        if epoch is None:
            return history[-1]
        if not 0 <= epoch < len(history):
            raise RegistryError("epoch-unavailable", f"epoch {epoch} not published")
        return history[epoch]

    def latest_epoch(self, creddef_id: Digest) -> int:
        return self.revocation_state(creddef_id).epoch

    def check_non_revoked(self, creddef_id: Digest, credential_index: int, min_epoch: int = 0) -> NonRevocation:
        state = self.revocation_state(creddef_id)
        if state.epoch < min_epoch:
            raise RegistryError("epoch-unavailable", f"latest epoch {state.epoch} < required {min_epoch}")
        key = self.get_creddef(creddef_id).issuer_signing_key
        if not check_signature(key, state.signing_bytes(), state.issuer_signature):
            raise RegistryError("bad-signature", "revocation snapshot signature does not verify")
        return NonRevocation(state.epoch, not state.is_revoked(credential_index))

    # -- raw access ----------------------------------------------------------------

    def records(self, kind: str | None = None) -> Iterator[Record]:
        for record in list(self._records):
            if kind is None or record.kind == kind:
                yield record

    def raw_record(self, seq: int) -> bytes:
        return self._raw[seq]

    def __len__(self) -> int:
        return len(self._records)

    def ping(self) -> None:
        """Reachability probe; always succeeds for the in-process store."""


class CachedRegistry:
    """Read-through cache over a registry for DIDs, schemas and credential
    definitions. Revocation state is always fetched live."""

    def __init__(self, backend):
        self._backend = backend
        self._dids: dict = {}
        self._schemas: dict = {}
        self._creddefs: dict = {}

    def resolve_did(self, did):
        if did not in self._dids:
            self._dids[did] = self._backend.resolve_did(did)
        return self._dids[did]

    def get_schema(self, schema_id):
        if schema_id not in self._schemas:
            self._schemas[schema_id] = self._backend.get_schema(schema_id)
        return self._schemas[schema_id]

    def get_creddef(self, creddef_id):
        if creddef_id not in self._creddefs:
            self._creddefs[creddef_id] = self._backend.get_creddef(creddef_id)
        return self._creddefs[creddef_id]

    def __getattr__(self, name):
        return getattr(self._backend, name)


class UnreachableRegistry:
    """Registry handle whose every call fails, for outage tests."""

    def __getattr__(self, name):
        def fail(*args, **kwargs):
            raise RegistryUnavailable(message=f"registry unreachable ({name})")

        return fail
