"""Selective-disclosure credentials over salted hash commitments.

A credential commits to every attribute as ``hash(canonical([name, value,
salt]))``. The issuer signs the root digest over the ordered commitment list,
the credential definition, the credential's revocation index and the holder's
binding key. A presentation opens a subset of the commitments, carries bare
digests for the rest, and is signed by the holder over the root, the
verifier's channel nonce and the list of disclosed names.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Collection, Iterable, Mapping

from .crypto_core import (
    KEY_SIZE,
    SALT_SIZE,
    Digest,
    KeyPair,
    b64d,
    canonical,
    canonical_parse,
    check_signature,
    commit,
    hash_canonical,
)
from .errors import CredentialError, RegistryUnavailable, RxError
from .identity_registry import (
    CredentialDefinition,
    CredentialSchema,
    GenesisRevocation,
    sign_revocation_state,
)

CHANNEL_NONCE_SIZE = 32

EPRESCRIPTION_SCHEMA = CredentialSchema(
    "e-prescription",
    "1.0",
    ("contract_address", "credential_index", "patient_name", "pharmaceutical", "quantity", "spending_key"),
)

FAILURE_REASONS = (
    "malformed",
    "bad-root",
    "bad-issuer-sig",
    "untrusted-issuer",
    "bad-holder-sig",
    "stale-nonce",
    "revoked",
    "registry-unavailable",
)


def compute_root(digests: Iterable[Digest], creddef_id: Digest, credential_index: int, holder_binding_pk: bytes) -> Digest:
    return hash_canonical([list(digests), creddef_id, credential_index, holder_binding_pk])


def attribute_digest(name: str, value: Any, salt: bytes) -> Digest:
    return commit(name, value, salt).value_digest


def _check_value(value):
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise CredentialError("schema-mismatch", f"attribute values are strings or integers, got {type(value).__name__}")


@dataclass(frozen=True)
class Attribute:
    name: str
    value: Any
    salt: bytes = field(repr=False)

    @property
    def digest(self) -> Digest:
        return attribute_digest(self.name, self.value, self.salt)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "salt": self.salt}

    @classmethod
    def from_dict(cls, d: dict) -> "Attribute":
        _exact_keys(d, {"name", "value", "salt"})
        _check_value(d["value"])
        salt = b64d(d["salt"])
        if len(salt) != SALT_SIZE:
            raise CredentialError("malformed", "salt must be 16 bytes")
        return cls(d["name"], d["value"], salt)


def _exact_keys(d, keys):
    if not isinstance(d, dict) or d.keys() != keys:
        raise CredentialError("malformed", f"expected keys {sorted(keys)}")


@dataclass(frozen=True)
class Credential:
    creddef_id: Digest
    credential_index: int
    holder_binding_pk: bytes
    attributes: tuple[Attribute, ...]
    root: Digest
    issuer_signature: bytes

    def value(self, name: str) -> Any:
        for attr in self.attributes:
            if attr.name == name:
                return attr.value
        raise CredentialError("unknown-attribute", name)

    @property
    def values(self) -> dict[str, Any]:
        return {a.name: a.value for a in self.attributes}

    def recompute_root(self) -> Digest:
        return compute_root((a.digest for a in self.attributes), self.creddef_id, self.credential_index, self.holder_binding_pk)

    def verify(self, creddef: CredentialDefinition, schema: CredentialSchema) -> bool:
        """Standalone check against a credential definition and its schema."""
        return (
            tuple(a.name for a in self.attributes) == schema.attribute_names
            and creddef.creddef_id == self.creddef_id
            and self.recompute_root() == self.root
            and check_signature(creddef.issuer_signing_key, self.root, self.issuer_signature)
        )

    def to_dict(self) -> dict:
        return {
            "creddef_id": self.creddef_id,
            "credential_index": self.credential_index,
            "holder_binding_pk": self.holder_binding_pk,
            "attributes": [a.to_dict() for a in self.attributes],
            "root": self.root,
            "issuer_signature": self.issuer_signature,
        }

    def to_bytes(self) -> bytes:
        return canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Credential":
        _exact_keys(d, {"creddef_id", "credential_index", "holder_binding_pk", "attributes", "root", "issuer_signature"})
        return cls(
            b64d(d["creddef_id"]),
            d["credential_index"],
            b64d(d["holder_binding_pk"]),
            tuple(Attribute.from_dict(a) for a in d["attributes"]),
            b64d(d["root"]),
            b64d(d["issuer_signature"]),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Credential":
        return cls.from_dict(canonical_parse(data))


@dataclass(frozen=True)
class ProofRequest:
    requested_attribute_names: frozenset[str]
    channel_nonce: bytes
    accepted_creddef_ids: frozenset[Digest] = frozenset()
    require_non_revocation: bool = True

    @classmethod
    def new(cls, names: Iterable[str], rng: random.Random, accepted_creddef_ids=(), require_non_revocation=True):
        return cls(frozenset(names), rng.randbytes(CHANNEL_NONCE_SIZE), frozenset(accepted_creddef_ids), require_non_revocation)

    def to_dict(self) -> dict:
        return {
            "requested_attribute_names": sorted(self.requested_attribute_names),
            "channel_nonce": self.channel_nonce,
            "accepted_creddef_ids": sorted(self.accepted_creddef_ids),
            "require_non_revocation": self.require_non_revocation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProofRequest":
        return cls(
            frozenset(d["requested_attribute_names"]),
            b64d(d["channel_nonce"]),
            frozenset(b64d(x) for x in d["accepted_creddef_ids"]),
            bool(d["require_non_revocation"]),
        )


def holder_signing_bytes(root: Digest, channel_nonce: bytes, disclosed_names: Iterable[str]) -> bytes:
    return canonical([root, channel_nonce, sorted(disclosed_names)])


@dataclass(frozen=True)
class Presentation:
    creddef_id: Digest
    credential_index: int
    holder_binding_pk: bytes
    root: Digest
    issuer_signature: bytes
    disclosed: tuple[Attribute, ...]
    undisclosed: tuple[tuple[str, Digest], ...]
    channel_nonce: bytes
    holder_signature: bytes

    @property
    def disclosed_values(self) -> dict[str, Any]:
        return {a.name: a.value for a in self.disclosed}

    def to_dict(self) -> dict:
        return {
            "creddef_id": self.creddef_id,
            "credential_index": self.credential_index,
            "holder_binding_pk": self.holder_binding_pk,
            "root": self.root,
            "issuer_signature": self.issuer_signature,
            "disclosed": [a.to_dict() for a in self.disclosed],
            "undisclosed": [{"name": n, "digest": d} for n, d in self.undisclosed],
            "channel_nonce": self.channel_nonce,
            "holder_signature": self.holder_signature,
        }

    def to_bytes(self) -> bytes:
        return canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Presentation":
        _exact_keys(d, {
            "creddef_id", "credential_index", "holder_binding_pk", "root", "issuer_signature",
            "disclosed", "undisclosed", "channel_nonce", "holder_signature",
        })
        if type(d["credential_index"]) is not int or d["credential_index"] < 0:
            raise CredentialError("malformed", "credential_index must be a non-negative integer")
        undisclosed = []
        for item in d["undisclosed"]:
            _exact_keys(item, {"name", "digest"})
            undisclosed.append((item["name"], b64d(item["digest"])))
        return cls(
            b64d(d["creddef_id"]),
            d["credential_index"],
            b64d(d["holder_binding_pk"]),
            b64d(d["root"]),
            b64d(d["issuer_signature"]),
            tuple(Attribute.from_dict(a) for a in d["disclosed"]),
            tuple(undisclosed),
            b64d(d["channel_nonce"]),
            b64d(d["holder_signature"]),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Presentation":
        """Strict parse: the input must already be canonical, so two different
        byte strings never decode to the same presentation."""
        return cls.from_dict(canonical_parse(data))


@dataclass(frozen=True)
class VerificationPolicy:
    trusted_issuer_dids: frozenset[str]
    require_non_revocation: bool = True
    min_epoch: int | None = None
    channel_nonce: bytes | None = None
    accepted_creddef_ids: frozenset[Digest] = frozenset()

    @classmethod
    def for_request(cls, request: ProofRequest, trusted_issuer_dids: Iterable[str], min_epoch=None):
        return cls(
            frozenset(trusted_issuer_dids),
            request.require_non_revocation,
            min_epoch,
            request.channel_nonce,
            request.accepted_creddef_ids,
        )


@dataclass(frozen=True)
class VerificationReport:
    valid: bool
    disclosed: dict[str, Any] = field(default_factory=dict)
    failure_reason: str | None = None
    revocation_epoch: int | None = None

    def to_dict(self) -> dict:
        d = {"valid": self.valid, "disclosed": self.disclosed}
        if self.failure_reason is not None:
            d["failure_reason"] = self.failure_reason
        if self.revocation_epoch is not None:
            d["revocation_epoch"] = self.revocation_epoch
        return d


# -- issuer side -------------------------------------------------------------------


def make_creddef(issuer: KeyPair, issuer_did: str, schema: CredentialSchema):
    """Build a credential definition plus the signatures the registry wants:
    a proof over the definition and the signed empty revocation state."""
    creddef = CredentialDefinition.for_issuer(schema.schema_id, issuer_did, issuer.public_key)
    proof = issuer.sign(canonical(creddef.to_dict()))
    genesis = GenesisRevocation(sign_revocation_state(issuer, creddef.revocation_registry_id, 0, ()))
    return creddef, proof, genesis


def issue(
    issuer: KeyPair,
    creddef: CredentialDefinition,
    schema: CredentialSchema,
    values: Mapping[str, Any],
    holder_binding_pk: bytes,
    credential_index: int,
    rng: random.Random,
    used_indices: Collection[int] = (),
) -> Credential:
    if set(values) != set(schema.attribute_names):
        missing = sorted(set(schema.attribute_names) - set(values))
        extra = sorted(set(values) - set(schema.attribute_names))
        raise CredentialError("schema-mismatch", f"missing {missing}, unexpected {extra}")
    for value in values.values():
        _check_value(value)
    if "credential_index" in values and values["credential_index"] != credential_index:
        raise CredentialError("schema-mismatch", "credential_index attribute differs from the assigned index")
    if credential_index < 0 or credential_index in used_indices:
        raise CredentialError("duplicate-index", f"credential index {credential_index} already used")
    if issuer.public_key != creddef.issuer_signing_key:
        raise CredentialError("wrong-issuer-key", "issuer key does not match the credential definition")
    if len(holder_binding_pk) != KEY_SIZE:
        raise CredentialError("malformed", "holder binding key must be 32 bytes")
    attributes = tuple(Attribute(name, values[name], rng.randbytes(SALT_SIZE)) for name in schema.attribute_names)
    creddef_id = creddef.creddef_id
    root = compute_root((a.digest for a in attributes), creddef_id, credential_index, holder_binding_pk)
    return Credential(creddef_id, credential_index, holder_binding_pk, attributes, root, issuer.sign(root))


def revoke(issuer: KeyPair, registry, creddef_id: Digest, credential_index: int | Iterable[int]) -> int:
    """Revoke one or more indices, returning the new registry epoch."""
    indices = {credential_index} if isinstance(credential_index, int) else set(credential_index)
    head = registry.revocation_state(creddef_id)
    revoked = head.revoked | indices
    epoch = head.epoch + 1
    signature = sign_revocation_state(issuer, head.registry_id, epoch, revoked)
    return registry.publish_revocation(creddef_id, epoch, revoked, signature).epoch


# -- holder side -------------------------------------------------------------------


def present(credential: Credential, holder: KeyPair, request: ProofRequest) -> Presentation:
    names = {a.name for a in credential.attributes}
    unknown = request.requested_attribute_names - names
    if unknown:
        raise CredentialError("unknown-attribute", f"not in credential: {sorted(unknown)}")
    if holder.public_key != credential.holder_binding_pk:
        raise CredentialError("wrong-holder-key", "holder key does not match the credential binding")
    wanted = set(request.requested_attribute_names)
    if request.require_non_revocation and "credential_index" in names:
        wanted.add("credential_index")
    disclosed = tuple(a for a in credential.attributes if a.name in wanted)
    undisclosed = tuple((a.name, a.digest) for a in credential.attributes if a.name not in wanted)
    signature = holder.sign(holder_signing_bytes(credential.root, request.channel_nonce, (a.name for a in disclosed)))
    return Presentation(
        credential.creddef_id,
        credential.credential_index,
        credential.holder_binding_pk,
        credential.root,
        credential.issuer_signature,
        disclosed,
        undisclosed,
        request.channel_nonce,
        signature,
    )


# -- verifier side -----------------------------------------------------------------


def _fail(reason, **kw) -> VerificationReport:
    return VerificationReport(False, failure_reason=reason, **kw)


def verify_presentation(presentation: Presentation | bytes, registry, policy: VerificationPolicy) -> VerificationReport:
    """Check a presentation; failures are reported, never raised."""
    if isinstance(presentation, (bytes, bytearray)):
        try:
            presentation = Presentation.from_bytes(bytes(presentation))
        except (RxError, KeyError, TypeError, ValueError):
            return _fail("malformed")
    p = presentation
    try:
        creddef = registry.get_creddef(p.creddef_id)
        schema = registry.get_schema(creddef.schema_id)
    except RegistryUnavailable:
        return _fail("registry-unavailable")
    except RxError:
        # an unregistered definition cannot chain to a trusted issuer
        return _fail("untrusted-issuer")

    if policy.channel_nonce is not None and p.channel_nonce != policy.channel_nonce:
        return _fail("stale-nonce")

    # every schema attribute appears exactly once, in schema order
    order = {name: i for i, name in enumerate(schema.attribute_names)}
    entries = [(a.name, a.digest) for a in p.disclosed] + list(p.undisclosed)
    if sorted(n for n, _ in entries) != sorted(schema.attribute_names) or len(entries) != len(order):
        return _fail("bad-root")
    for part in (p.disclosed, p.undisclosed):
        positions = [order[x.name if isinstance(x, Attribute) else x[0]] for x in part]
        if positions != sorted(positions):
            return _fail("bad-root")
    entries.sort(key=lambda e: order[e[0]])
    disclosed = p.disclosed_values
    if "credential_index" in disclosed and disclosed["credential_index"] != p.credential_index:
        return _fail("bad-root")
    if compute_root((d for _, d in entries), p.creddef_id, p.credential_index, p.holder_binding_pk) != p.root:
        return _fail("bad-root")

    if not check_signature(creddef.issuer_signing_key, p.root, p.issuer_signature):
        return _fail("bad-issuer-sig")
    if creddef.issuer_did not in policy.trusted_issuer_dids:
        return _fail("untrusted-issuer")
    if policy.accepted_creddef_ids and p.creddef_id not in policy.accepted_creddef_ids:
        return _fail("untrusted-issuer")
    signed = holder_signing_bytes(p.root, p.channel_nonce, (a.name for a in p.disclosed))
    if not check_signature(p.holder_binding_pk, signed, p.holder_signature):
        return _fail("bad-holder-sig")

    epoch = None
    if policy.require_non_revocation:
        try:
            min_epoch = policy.min_epoch
            if min_epoch is None:
                min_epoch = registry.latest_epoch(p.creddef_id)
            status = registry.check_non_revoked(p.creddef_id, p.credential_index, min_epoch)
        except RxError:
            return _fail("registry-unavailable")
        epoch = status.epoch
        if not status.non_revoked:
            return _fail("revoked", revocation_epoch=epoch)
    return VerificationReport(True, disclosed, None, epoch)

