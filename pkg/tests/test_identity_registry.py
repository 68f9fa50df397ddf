import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rxledger.credentials import EPRESCRIPTION_SCHEMA, make_creddef
from rxledger.crypto_core import canonical, canonical_parse, hash_canonical, random_keypair
from rxledger.errors import RegistryError, RegistryUnavailable
from rxledger.identity_registry import (
    CachedRegistry,
    CredentialDefinition,
    CredentialSchema,
    DidDocument,
    Registry,
    UnreachableRegistry,
    decode_bitmap,
    encode_bitmap,
    is_did,
    new_did,
    sign_revocation_state,
)

from conftest import Issuer


def _doc(rng, role="doctor"):
    key = random_keypair(rng)
    doc = DidDocument(new_did(rng), key.public_key, "mem://x", role)
    return doc, key


# -- DIDs --------------------------------------------------------------------------


def test_register_and_resolve(rng):
    reg = Registry()
    doc, key = _doc(rng)
    reg.register_did(doc, key.sign(doc.signing_bytes()))
    assert reg.resolve_did(doc.did) == doc


def test_did_errors(rng):
    reg = Registry()
    doc, key = _doc(rng)
    proof = key.sign(doc.signing_bytes())
    with pytest.raises(RegistryError) as e:
        reg.register_did(doc, random_keypair(rng).sign(doc.signing_bytes()))
    assert e.value.code == "bad-proof"
    reg.register_did(doc, proof)
    with pytest.raises(RegistryError) as e:
        reg.register_did(doc, proof)
    assert e.value.code == "duplicate-did"
    patient, pkey = _doc(rng, "patient")
    with pytest.raises(RegistryError) as e:
        reg.register_did(patient, pkey.sign(patient.signing_bytes()))
    assert e.value.code == "not-public"
    with pytest.raises(RegistryError) as e:
        reg.resolve_did("did:rx:nobody")
    assert e.value.code == "not-found"


@given(st.randoms(use_true_random=False))
def test_new_did_is_well_formed(r):
    did = new_did(r)
    assert is_did(did)
    assert not is_did(did + "A")
    assert not is_did(did.replace("did:rx:", "did:xx:"))


# -- schemas and credential definitions ----------------------------------------------


def test_schema_rules():
    with pytest.raises(RegistryError):
        CredentialSchema("s", "1", ("b", "a"))
    with pytest.raises(RegistryError):
        CredentialSchema("s", "1", ("a", "a"))
    with pytest.raises(RegistryError):
        CredentialSchema("s", "1", ())
    reg = Registry()
    sid = reg.register_schema(EPRESCRIPTION_SCHEMA)
    assert reg.register_schema(EPRESCRIPTION_SCHEMA) == sid
    assert len(reg) == 1
    assert sid == hash_canonical(EPRESCRIPTION_SCHEMA.to_dict())


def test_creddef_registration_rules(rng):
    reg = Registry()
    issuer = Issuer.create(rng, reg)
    assert reg.get_creddef(issuer.creddef.creddef_id) == issuer.creddef
    assert reg.latest_epoch(issuer.creddef.creddef_id) == 0

    creddef, proof, genesis = make_creddef(issuer.key, issuer.did, EPRESCRIPTION_SCHEMA)
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(creddef, proof, genesis)
    assert e.value.code == "duplicate"

    ph_doc, ph_key = _doc(rng, "pharmacy")
    reg.register_did(ph_doc, ph_key.sign(ph_doc.signing_bytes()))
    creddef, proof, genesis = make_creddef(ph_key, ph_doc.did, EPRESCRIPTION_SCHEMA)
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(creddef, proof, genesis)
    assert e.value.code == "unknown-issuer"

    other = CredentialSchema("other", "1", ("a",))
    doc, key = _doc(rng)
    reg.register_did(doc, key.sign(doc.signing_bytes()))
    creddef, proof, genesis = make_creddef(key, doc.did, other)
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(creddef, proof, genesis)
    assert e.value.code == "unknown-schema"

    reg.register_schema(other)
    wrong = CredentialDefinition(creddef.schema_id, doc.did, random_keypair(rng).public_key,
                                 creddef.revocation_registry_id)
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(wrong, proof, genesis)
    assert e.value.code == "bad-proof"
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(creddef, random_keypair(rng).sign(b"x"), genesis)
    assert e.value.code == "bad-proof"
    bad_genesis = type(genesis)(key.sign(b"not the genesis"))
    with pytest.raises(RegistryError) as e:
        reg.register_creddef(creddef, proof, bad_genesis)
    assert e.value.code == "bad-signature"
    assert reg.register_creddef(creddef, proof, genesis) == creddef.creddef_id


# -- revocation ------------------------------------------------------------------------


@given(st.sets(st.integers(0, 300), max_size=40))
def test_bitmap_roundtrip_and_unique(indices):
    bitmap = encode_bitmap(indices)
    assert decode_bitmap(bitmap) == frozenset(indices)
    assert not bitmap or bitmap[-1] != 0


def test_bitmap_layout_is_lsb_first():
    assert encode_bitmap([0]) == b"\x01"
    assert encode_bitmap([7, 8]) == b"\x80\x01"
    assert encode_bitmap([]) == b""
    with pytest.raises(RegistryError):
        decode_bitmap(b"\x01\x00")


def _publish(issuer, epoch, revoked, key=None):
    head = issuer.registry.revocation_state(issuer.creddef.creddef_id)
    sig = sign_revocation_state(key or issuer.key, head.registry_id, epoch, revoked)
    return issuer.registry.publish_revocation(issuer.creddef.creddef_id, epoch, revoked, sig)


def test_revocation_rules(issuer, rng):
    cid = issuer.creddef.creddef_id
    assert _publish(issuer, 1, {3}).epoch == 1
    for epoch, revoked, key, code in [
        (1, {3, 4}, None, "stale-epoch"),
        (3, {3, 4}, None, "stale-epoch"),
        (2, {4}, None, "bit-clearing"),
        (2, {3, 4}, random_keypair(rng), "bad-signature"),
    ]:
        with pytest.raises(RegistryError) as e:
            _publish(issuer, epoch, revoked, key)
        assert e.value.code == code
    assert issuer.registry.latest_epoch(cid) == 1
    assert issuer.registry.check_non_revoked(cid, 3).non_revoked is False
    assert issuer.registry.check_non_revoked(cid, 4).non_revoked is True
    assert issuer.registry.revocation_state(cid, 0).revoked == frozenset()
    with pytest.raises(RegistryError) as e:
        issuer.registry.revocation_state(cid, 2)
    assert e.value.code == "epoch-unavailable"
    with pytest.raises(RegistryError) as e:
        issuer.registry.check_non_revoked(cid, 4, min_epoch=5)
    assert e.value.code == "epoch-unavailable"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["grow", "clear", "stale", "forge"]), st.sets(st.integers(0, 63), max_size=4)),
                max_size=12),
       st.integers(0, 2**32))
def test_revocation_history_is_monotone(ops, seed):
    r = random.Random(seed)
    issuer = Issuer.create(r)
    cid = issuer.creddef.creddef_id
    for kind, extra in ops:
        head = issuer.registry.revocation_state(cid)
        try:
            if kind == "grow":
                _publish(issuer, head.epoch + 1, head.revoked | extra)
            elif kind == "clear" and head.revoked:
                _publish(issuer, head.epoch + 1, set(list(head.revoked)[1:]) | extra)
            elif kind == "stale":
                _publish(issuer, head.epoch, head.revoked | extra)
            elif kind == "forge":
                _publish(issuer, head.epoch + 1, head.revoked | extra, random_keypair(r))
        except RegistryError:
            assert kind != "grow"
    history = [issuer.registry.revocation_state(cid, e) for e in range(issuer.registry.latest_epoch(cid) + 1)]
    for before, after in zip(history, history[1:]):
        assert after.epoch == before.epoch + 1
        assert before.revoked <= after.revoked


# -- persistence -----------------------------------------------------------------------


def test_store_replays_byte_identically(tmp_path, rng):
    path = tmp_path / "registry.ndjson"
    reg = Registry(path)
    issuer = Issuer.create(rng, reg)
    _publish(issuer, 1, {0, 9})
    reg.close()
    data = path.read_bytes()
    again = Registry(path)
    assert b"".join(again.raw_record(i) + b"\n" for i in range(len(again))) == data
    assert again.revocation_state(issuer.creddef.creddef_id).revoked == {0, 9}
    _publish(Issuer(again, issuer.key, issuer.did, issuer.schema, issuer.creddef, rng), 2, {0, 9, 10})
    again.close()
    assert path.read_bytes().startswith(data)


def test_store_rejects_tampered_record(tmp_path, rng):
    path = tmp_path / "registry.ndjson"
    reg = Registry(path)
    issuer = Issuer.create(rng, reg)
    _publish(issuer, 1, {5})
    reg.close()
    lines = path.read_bytes().splitlines()
    record = canonical_parse(lines[-1])
    record["body"]["epoch"] = 1
    record["body"]["revoked"] = ""
    lines[-1] = canonical(record)
    path.write_bytes(b"\n".join(lines) + b"\n")
    with pytest.raises(RegistryError):
        Registry(path)


def test_content_ids_recompute(rng):
    reg = Registry()
    Issuer.create(rng, reg)
    schema_rec = next(reg.records("schema"))
    creddef_rec = next(reg.records("creddef"))
    assert hash_canonical(schema_rec.body) == CredentialSchema.from_dict(schema_rec.body).schema_id
    creddef = CredentialDefinition.from_dict(creddef_rec.body["creddef"])
    assert hash_canonical(creddef_rec.body["creddef"]) == creddef.creddef_id


# -- availability ------------------------------------------------------------------------


def test_cached_registry_reads_revocation_live(issuer):
    cached = CachedRegistry(issuer.registry)
    cid = issuer.creddef.creddef_id
    assert cached.get_creddef(cid) == issuer.creddef
    assert cached.check_non_revoked(cid, 2).non_revoked
    _publish(issuer, 1, {2})
    assert not cached.check_non_revoked(cid, 2).non_revoked


def test_unreachable_registry():
    with pytest.raises(RegistryUnavailable) as e:
        UnreachableRegistry().resolve_did("did:rx:x")
    assert e.value.code == "registry-unavailable"
