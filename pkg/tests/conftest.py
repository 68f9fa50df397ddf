import os
import random
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from rxledger.credentials import EPRESCRIPTION_SCHEMA, ProofRequest, issue, make_creddef, present
from rxledger.crypto_core import KeyPair, b64e, random_keypair
from rxledger.identity_registry import CredentialDefinition, CredentialSchema, DidDocument, Registry, new_did


@dataclass
class Issuer:
    """A registered issuer with one credential definition."""

    registry: Registry
    key: KeyPair
    did: str
    schema: CredentialSchema
    creddef: CredentialDefinition
    rng: random.Random
    next_index: int = 0
    holders: dict = field(default_factory=dict)

    @classmethod
    def create(cls, rng, registry=None, schema=EPRESCRIPTION_SCHEMA):
        registry = registry if registry is not None else Registry()
        key = random_keypair(rng)
        did = new_did(rng)
        doc = DidDocument(did, key.public_key, "mem://issuer", "doctor")
        registry.register_did(doc, key.sign(doc.signing_bytes()))
        registry.register_schema(schema)
        creddef, proof, genesis = make_creddef(key, did, schema)
        registry.register_creddef(creddef, proof, genesis)
        return cls(registry, key, did, schema, creddef, rng)

    def issue(self, values=None, holder=None):
        index = self.next_index
        self.next_index += 1
        holder = holder or random_keypair(self.rng)
        values = dict(values or default_values(self.rng))
        values["credential_index"] = index
        cred = issue(self.key, self.creddef, self.schema, values, holder.public_key, index, self.rng)
        return cred, holder

    def request(self, names, require_non_revocation=True):
        return ProofRequest.new(names, self.rng, require_non_revocation=require_non_revocation)

    def presentation(self, names=("pharmaceutical", "quantity", "spending_key", "contract_address")):
        cred, holder = self.issue()
        request = self.request(names)
        return present(cred, holder, request), request, cred


def default_values(rng):
    return {
        "contract_address": b64e(rng.randbytes(32)),
        "credential_index": 0,
        "patient_name": "A. Patient",
        "pharmaceutical": "Amoxicillin 500mg",
        "quantity": "20",
        "spending_key": b64e(rng.randbytes(32)),
    }


@pytest.fixture
def rng():
    return random.Random(20240611)


@pytest.fixture
def issuer(rng):
    return Issuer.create(rng)


SRC = Path(__file__).resolve().parents[1] / "src"

_TRANSCRIPT_SNIPPET = (
    "import sys\n"
    "from rxledger.harness.scenario import run_scenario\n"
    "sys.stdout.buffer.write(run_scenario(sys.argv[1]).transcript_bytes())\n"
)


def fresh_source_copy(tmp_dir) -> Path:
    """Copy the package source without bytecode caches, as a second build."""
    dest = Path(tmp_dir) / "src"
    shutil.copytree(SRC, dest, ignore=shutil.ignore_patterns("__pycache__", "*.pyc"))
    return dest


def transcript_in_subprocess(scenario: str, src: Path = SRC, hash_seed: str = "0") -> bytes:
    env = {**os.environ, "PYTHONPATH": str(src), "PYTHONHASHSEED": hash_seed, "PYTHONDONTWRITEBYTECODE": "1"}
    out = subprocess.run([sys.executable, "-c", _TRANSCRIPT_SNIPPET, scenario], env=env, cwd=src.parent,
                         capture_output=True, check=True, timeout=120)
    return out.stdout
