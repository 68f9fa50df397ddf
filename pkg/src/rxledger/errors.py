"""Exception hierarchy shared by every rxledger module.

Each error carries a stable, machine-readable ``code`` (for example
``"duplicate-did"`` or ``"stale-epoch"``) next to its human message, so that
harness expectations and CLI output can match on codes rather than prose.
"""

from __future__ import annotations


class RxError(Exception):
    code = "error"

    def __init__(self, code: str | None = None, message: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(message or self.code)

    @property
    def message(self) -> str:
        return str(self)


class CryptoError(RxError):
    code = "crypto-error"


class InvalidEncoding(CryptoError):
    """Malformed key, signature or base64 text (distinct from a failed check)."""

    code = "invalid-encoding"


class CanonicalizationError(CryptoError):
    code = "canonicalization-error"


class TamperError(CryptoError):
    """AEAD authentication failed."""

    code = "tamper"


class RegistryError(RxError):
    code = "registry-error"


class RegistryUnavailable(RegistryError):
    code = "registry-unavailable"


class LedgerError(RxError):
    code = "ledger-error"


class CredentialError(RxError):
    code = "credential-error"


class AgentError(RxError):
    code = "agent-error"


class ProtocolError(AgentError):
    """Message arrived out of order, or for an unknown session."""

    code = "protocol-error"
