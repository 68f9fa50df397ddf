import base64
import hashlib
import itertools
import json
import random
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import given, settings
from hypothesis import strategies as st

from rxledger.credentials import (
    EPRESCRIPTION_SCHEMA,
    FAILURE_REASONS,
    Credential,
    Presentation,
    ProofRequest,
    VerificationPolicy,
    issue,
    present,
    revoke,
    verify_presentation,
)
from rxledger.crypto_core import b64e, canonical, canonical_parse, random_keypair
from rxledger.errors import CredentialError
from rxledger.identity_registry import CredentialSchema, UnreachableRegistry

from conftest import Issuer
from make_golden import build

TESTDATA = Path(__file__).parent / "testdata"
GENERIC_SCHEMA = CredentialSchema("generic", "1", ("a1", "a2", "a3", "a4", "a5", "a6"))


def policy_for(issuer, request, **kw):
    return VerificationPolicy.for_request(request, {issuer.did}, **kw)


# -- golden vectors --------------------------------------------------------------------


def _b64(data):
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode()


def _json(value):
    return json.dumps(value, separators=(",", ":"), ensure_ascii=False).encode()


def _unb64(text):
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


@pytest.mark.parametrize("name", ["credential.json", "presentation.json"])
def test_golden_bytes_are_stable(name):
    creddef, cred, pres = build()
    frozen = (TESTDATA / name).read_bytes().rstrip(b"\n")
    produced = cred.to_bytes() if name == "credential.json" else pres.to_bytes()
    assert produced == frozen


def test_golden_credential_recomputes_independently():
    d = json.loads((TESTDATA / "credential.json").read_bytes())
    digests = [_b64(hashlib.sha256(_json([a["name"], a["value"], a["salt"]])).digest()) for a in d["attributes"]]
    root = hashlib.sha256(_json([digests, d["creddef_id"], d["credential_index"], d["holder_binding_pk"]])).digest()
    assert _b64(root) == d["root"]
    issuer_pk = Ed25519PrivateKey.from_private_bytes(bytes([1]) * 32).public_key()
    issuer_pk.verify(_unb64(d["issuer_signature"]), root)
    assert [a["name"] for a in d["attributes"]] == list(EPRESCRIPTION_SCHEMA.attribute_names)


def test_golden_presentation_recomputes_independently():
    d = json.loads((TESTDATA / "presentation.json").read_bytes())
    entries = {a["name"]: _b64(hashlib.sha256(_json([a["name"], a["value"], a["salt"]])).digest()) for a in d["disclosed"]}
    entries.update({u["name"]: u["digest"] for u in d["undisclosed"]})
    digests = [entries[n] for n in EPRESCRIPTION_SCHEMA.attribute_names]
    root = hashlib.sha256(_json([digests, d["creddef_id"], d["credential_index"], d["holder_binding_pk"]])).digest()
    assert _b64(root) == d["root"]
    names = sorted(a["name"] for a in d["disclosed"])
    holder = Ed25519PrivateKey.from_private_bytes(bytes([2]) * 32).public_key()
    holder.verify(_unb64(d["holder_signature"]), _json([d["root"], d["channel_nonce"], names]))
    assert "patient_name" not in names


# -- issuance ----------------------------------------------------------------------------


def test_issue_and_verify(issuer):
    cred, holder = issuer.issue()
    assert cred.verify(issuer.creddef, issuer.schema)
    assert Credential.from_bytes(cred.to_bytes()) == cred
    assert cred.value("credential_index") == cred.credential_index


def test_issue_errors(issuer, rng):
    values = dict(issuer.issue()[0].values)
    with pytest.raises(CredentialError) as e:
        issue(issuer.key, issuer.creddef, issuer.schema, {k: v for k, v in values.items() if k != "quantity"},
              bytes(32), values["credential_index"], rng)
    assert e.value.code == "schema-mismatch"
    with pytest.raises(CredentialError) as e:
        issue(issuer.key, issuer.creddef, issuer.schema, values, bytes(32), values["credential_index"], rng,
              used_indices={values["credential_index"]})
    assert e.value.code == "duplicate-index"
    with pytest.raises(CredentialError) as e:
        issue(random_keypair(rng), issuer.creddef, issuer.schema, values, bytes(32), values["credential_index"], rng)
    assert e.value.code == "wrong-issuer-key"
    with pytest.raises(CredentialError):
        issue(issuer.key, issuer.creddef, issuer.schema, {**values, "quantity": 1.5}, bytes(32),
              values["credential_index"], rng)


# -- completeness ---------------------------------------------------------------------------


def test_every_subset_verifies(rng):
    issuer = Issuer.create(rng, schema=GENERIC_SCHEMA)
    holder = random_keypair(rng)
    values = {n: f"value-{n}" for n in GENERIC_SCHEMA.attribute_names}
    cred = issue(issuer.key, issuer.creddef, GENERIC_SCHEMA, values, holder.public_key, 0, rng)
    names = GENERIC_SCHEMA.attribute_names
    for k in range(len(names) + 1):
        for subset in itertools.combinations(names, k):
            request = ProofRequest.new(subset, rng)
            report = verify_presentation(present(cred, holder, request).to_bytes(), issuer.registry,
                                         policy_for(issuer, request))
            assert report.valid, subset
            assert report.disclosed == {n: values[n] for n in subset}


def test_non_revocation_discloses_index(issuer):
    pres, request, cred = issuer.presentation(("pharmaceutical",))
    assert set(pres.disclosed_values) == {"pharmaceutical", "credential_index"}
    report = verify_presentation(pres, issuer.registry, policy_for(issuer, request))
    assert report.valid and report.revocation_epoch == 0


# -- confidentiality ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.lists(st.binary(min_size=16, max_size=40), min_size=6, max_size=6),
       st.sets(st.sampled_from(GENERIC_SCHEMA.attribute_names)),
       st.integers(0, 2**32))
def test_presentation_leaks_nothing_outside_disclosed_set(raw_values, disclosed, seed):
    r = random.Random(seed)
    issuer = Issuer.create(r, schema=GENERIC_SCHEMA)
    holder = random_keypair(r)
    values = {n: b64e(v) for n, v in zip(GENERIC_SCHEMA.attribute_names, raw_values)}
    cred = issue(issuer.key, issuer.creddef, GENERIC_SCHEMA, values, holder.public_key, 0, r)
    data = present(cred, holder, ProofRequest.new(disclosed, r)).to_bytes()
    # equal or overlapping inputs may legitimately show up through a disclosed attribute
    shown = [a.value.encode() + b"\x00" + b64e(a.salt).encode() for a in cred.attributes if a.name in disclosed]
    for attr in cred.attributes:
        if attr.name in disclosed:
            continue
        for secret in (attr.value.encode(), attr.salt, b64e(attr.salt).encode()):
            assert secret not in data or any(secret in s for s in shown)


# -- soundness -----------------------------------------------------------------------------------


def test_single_byte_mutations_fail(issuer, rng):
    pres, request, _ = issuer.presentation()
    data = pres.to_bytes()
    policy = policy_for(issuer, request)
    assert verify_presentation(data, issuer.registry, policy).valid
    for _ in range(500):
        mutated = bytearray(data)
        i = rng.randrange(len(mutated))
        mutated[i] = (mutated[i] + rng.randrange(1, 256)) % 256
        report = verify_presentation(bytes(mutated), issuer.registry, policy)
        assert not report.valid
        assert report.failure_reason in FAILURE_REASONS


def test_stale_nonce(issuer, rng):
    pres, request, _ = issuer.presentation()
    fresh = ProofRequest.new(request.requested_attribute_names, rng)
    report = verify_presentation(pres, issuer.registry, policy_for(issuer, fresh))
    assert report.failure_reason == "stale-nonce"


def test_revoked_after_revocation(issuer):
    pres, request, cred = issuer.presentation()
    policy = policy_for(issuer, request)
    assert verify_presentation(pres, issuer.registry, policy).valid
    epoch = revoke(issuer.key, issuer.registry, issuer.creddef.creddef_id, cred.credential_index)
    report = verify_presentation(pres, issuer.registry, policy)
    assert (report.failure_reason, report.revocation_epoch) == ("revoked", epoch)
    other, other_req, _ = issuer.presentation()
    assert verify_presentation(other, issuer.registry, policy_for(issuer, other_req)).valid


def test_min_epoch_not_reached(issuer):
    pres, request, _ = issuer.presentation()
    report = verify_presentation(pres, issuer.registry, policy_for(issuer, request, min_epoch=3))
    assert report.failure_reason == "registry-unavailable"


def test_untrusted_and_unknown_issuer(issuer, rng):
    pres, request, _ = issuer.presentation()
    report = verify_presentation(pres, issuer.registry, VerificationPolicy.for_request(request, set()))
    assert report.failure_reason == "untrusted-issuer"
    stranger = Issuer.create(rng)
    report = verify_presentation(pres, stranger.registry, policy_for(issuer, request))
    assert report.failure_reason == "untrusted-issuer"


def test_registry_outage(issuer):
    pres, request, _ = issuer.presentation()
    report = verify_presentation(pres, UnreachableRegistry(), policy_for(issuer, request))
    assert report.failure_reason == "registry-unavailable"


def test_forged_issuer_signature(issuer, rng):
    pres, request, _ = issuer.presentation()
    d = canonical_parse(pres.to_bytes())
    d["issuer_signature"] = random_keypair(rng).sign(b64e(pres.root).encode())
    report = verify_presentation(canonical(d), issuer.registry, policy_for(issuer, request))
    assert report.failure_reason == "bad-issuer-sig"


def test_attribute_swapped_between_credentials(issuer):
    a, request, _ = issuer.presentation()
    b, _, _ = issuer.presentation()
    d = canonical_parse(a.to_bytes())
    d["disclosed"] = canonical_parse(b.to_bytes())["disclosed"]
    report = verify_presentation(canonical(d), issuer.registry, policy_for(issuer, request))
    assert report.failure_reason == "bad-root"


def test_disclosed_order_and_duplicates_rejected(issuer):
    pres, request, _ = issuer.presentation()
    d = canonical_parse(pres.to_bytes())
    d["disclosed"] = d["disclosed"][::-1]
    assert verify_presentation(canonical(d), issuer.registry, policy_for(issuer, request)).failure_reason == "bad-root"
    d = canonical_parse(pres.to_bytes())
    d["undisclosed"] = d["undisclosed"] + d["undisclosed"][:1]
    assert verify_presentation(canonical(d), issuer.registry, policy_for(issuer, request)).failure_reason == "bad-root"


def test_hiding_a_disclosed_attribute_breaks_holder_signature(issuer):
    pres, request, _ = issuer.presentation()
    d = canonical_parse(pres.to_bytes())
    moved = d["disclosed"].pop()
    digest = next(a for a in pres.disclosed if a.name == moved["name"]).digest
    d["undisclosed"].append({"name": moved["name"], "digest": b64e(digest)})
    report = verify_presentation(canonical(d), issuer.registry, policy_for(issuer, request))
    assert report.failure_reason == "bad-holder-sig"


def test_non_canonical_bytes_are_malformed(issuer):
    pres, request, _ = issuer.presentation()
    pretty = json.dumps(canonical_parse(pres.to_bytes()), indent=1).encode()
    assert verify_presentation(pretty, issuer.registry, policy_for(issuer, request)).failure_reason == "malformed"
    assert verify_presentation(b"{}", issuer.registry, policy_for(issuer, request)).failure_reason == "malformed"


# -- holder binding ---------------------------------------------------------------------------------


def test_holder_binding(issuer, rng):
    cred, holder = issuer.issue()
    thief = random_keypair(rng)
    request = issuer.request(["quantity"])
    with pytest.raises(CredentialError) as e:
        present(cred, thief, request)
    assert e.value.code == "wrong-holder-key"
    honest = present(cred, holder, request)
    forged = Presentation(*[getattr(honest, f) for f in (
        "creddef_id", "credential_index", "holder_binding_pk", "root", "issuer_signature", "disclosed",
        "undisclosed", "channel_nonce")], thief.sign(b"anything"))
    report = verify_presentation(forged, issuer.registry, policy_for(issuer, request))
    assert report.failure_reason == "bad-holder-sig"


def test_unknown_attribute_requested(issuer):
    cred, holder = issuer.issue()
    with pytest.raises(CredentialError) as e:
        present(cred, holder, issuer.request(["blood_type"]))
    assert e.value.code == "unknown-attribute"
