"""Deterministic primitives: Ed25519 signatures, SHA-256, salted commitments,
ChaCha20-Poly1305 channel sealing, X25519 key agreement and canonical JSON.

Randomness is always injected. Anything that needs fresh bytes takes a
``random.Random`` instance: a seeded ``random.Random(seed)`` in simulation,
``random.SystemRandom()`` (OS entropy) in production.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from typing import Any

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import CanonicalizationError, InvalidEncoding, TamperError

KEY_SIZE = 32
SIGNATURE_SIZE = 64
DIGEST_SIZE = 32
SALT_SIZE = 16
NONCE_SIZE = 12

Digest = bytes
Signature = bytes

system_rng = random.SystemRandom()


# -- base64url ---------------------------------------------------------------

_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")


def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64d(text: str) -> bytes:
    """Strict unpadded base64url decoding.

    Rejects padding, foreign characters and non-canonical trailing bits, so
    every byte-string has exactly one textual form.
    """
    if not isinstance(text, str) or not _B64URL_RE.match(text) or len(text) % 4 == 1:
        raise InvalidEncoding(message=f"not unpadded base64url: {text!r:.60}")
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise InvalidEncoding(message=str(exc)) from exc
    if b64e(data) != text:
        raise InvalidEncoding(message="non-canonical base64url")
    return data


# -- canonical JSON ----------------------------------------------------------


def to_jsonable(value: Any) -> Any:
    """Validate and convert to plain JSON types (bytes become base64url text)."""
    # bool before int: bool is an int subclass
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return b64e(bytes(value))
    if isinstance(value, dict):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(message=f"map key must be str, got {type(key).__name__}")
            out[key] = to_jsonable(item)
        return out
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    raise CanonicalizationError(message=f"unsupported value kind: {type(value).__name__}")


def canonical(value: Any) -> bytes:
    """Serialize structured data to its unique canonical byte form.

    Keys are sorted (code point order equals UTF-8 byte order), there is no
    whitespace, integers use shortest decimal form and byte-strings become
    unpadded base64url text. Floats are rejected.
    """
    return json.dumps(
        to_jsonable(value),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def _no_floats(text: str) -> Any:
    raise CanonicalizationError(message=f"float literal not allowed: {text}")


def canonical_parse(data: bytes) -> Any:
    """Parse canonical bytes, rejecting any input that is not already canonical."""
    try:
        value = json.loads(
            data.decode("utf-8"),
            parse_float=_no_floats,
            parse_constant=_no_floats,
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CanonicalizationError(message=f"not valid JSON: {exc}") from exc
    if canonical(value) != data:
        raise CanonicalizationError(message="input is not in canonical form")
    return value


# -- hashing and commitments -------------------------------------------------


def hash_bytes(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def hash_canonical(value: Any) -> Digest:
    return hash_bytes(canonical(value))


@dataclass(frozen=True)
class SaltedCommitment:
    salt: bytes
    value_digest: Digest


def commit(name: str, value: Any, salt: bytes) -> SaltedCommitment:
    if len(salt) != SALT_SIZE:
        raise InvalidEncoding(message=f"salt must be {SALT_SIZE} bytes")
    return SaltedCommitment(salt, hash_canonical([name, value, salt]))


# -- signatures ---------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    secret_key: bytes = field(repr=False)
    public_key: bytes
    _signer: Ed25519PrivateKey = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self._signer is None:
            object.__setattr__(self, "_signer", Ed25519PrivateKey.from_private_bytes(self.secret_key))

    def sign(self, message: bytes) -> Signature:
        return self._signer.sign(message)


def keygen(seed: bytes) -> KeyPair:
    if len(seed) != KEY_SIZE:
        raise InvalidEncoding(message=f"seed must be {KEY_SIZE} bytes")
    signer = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    public = signer.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(bytes(seed), public, signer)


def random_keypair(rng: random.Random) -> KeyPair:
    return keygen(rng.randbytes(KEY_SIZE))


def sign(secret_key: bytes | KeyPair, message: bytes) -> Signature:
    keypair = secret_key if isinstance(secret_key, KeyPair) else keygen(secret_key)
    return keypair.sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != KEY_SIZE:
        raise InvalidEncoding(message=f"public key must be {KEY_SIZE} bytes")
    if len(signature) != SIGNATURE_SIZE:
        raise InvalidEncoding(message=f"signature must be {SIGNATURE_SIZE} bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except InvalidSignature:
        return False
    except ValueError as exc:
        raise InvalidEncoding(message=str(exc)) from exc
    return True


def check_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Like :func:`verify`, but malformed inputs count as a failed check."""
    try:
        return verify(public_key, message, signature)
    except InvalidEncoding:
        return False


# -- channel encryption --------------------------------------------------------


def seal(channel_key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
    if len(channel_key) != KEY_SIZE or len(nonce) != NONCE_SIZE:
        raise InvalidEncoding(message="channel key must be 32 bytes and nonce 12 bytes")
    return ChaCha20Poly1305(channel_key).encrypt(nonce, plaintext, aad)


def open_sealed(channel_key: bytes, ciphertext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
    if len(channel_key) != KEY_SIZE or len(nonce) != NONCE_SIZE:
        raise InvalidEncoding(message="channel key must be 32 bytes and nonce 12 bytes")
    try:
        return ChaCha20Poly1305(channel_key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise TamperError(message="ciphertext failed authentication") from exc


@dataclass(frozen=True)
class EphemeralKey:
    private: X25519PrivateKey = field(repr=False)
    public_key: bytes


def ephemeral_keypair(rng: random.Random) -> EphemeralKey:
    private = X25519PrivateKey.from_private_bytes(rng.randbytes(KEY_SIZE))
    return EphemeralKey(private, private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw))


def derive_channel_key(mine: EphemeralKey, their_public: bytes, salt: bytes, info: bytes) -> bytes:
    if len(their_public) != KEY_SIZE:
        raise InvalidEncoding(message="ephemeral key must be 32 bytes")
    shared = mine.private.exchange(X25519PublicKey.from_public_bytes(their_public))
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=info).derive(shared)
