"""Totally ordered transaction log and the prescription-token state machine.

Each doctor deploys a contract whose admin may create tokens addressed by a
one-time public key. Whoever holds the matching secret key can spend a token
until its redemption counter reaches zero:

* ``create`` by a key outside the contract's issuer set fails with
  ``"Sender is not the admin of the contract"``;
* ``spend`` with no redemptions left (or for a key that never had a token)
  fails with ``"Already spent"``.

:class:`StateMachine` is the pure, sequential transition function.
:class:`Ledger` puts a single applier thread in front of it so any number of
threads may submit while exactly one of them mutates state.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .crypto_core import (
    KEY_SIZE,
    Digest,
    KeyPair,
    b64d,
    canonical,
    canonical_parse,
    check_signature,
    hash_canonical,
)
from .errors import LedgerError

NOT_ADMIN = "Sender is not the admin of the contract"
ALREADY_SPENT = "Already spent"


# -- commands ------------------------------------------------------------------


@dataclass(frozen=True)
class Deploy:
    op = "deploy"

    def to_dict(self) -> dict:
        return {"op": self.op}


@dataclass(frozen=True)
class Create:
    contract_address: Digest
    patient_pk: bytes
    count: int
    op = "create"

    def to_dict(self) -> dict:
        return {"op": self.op, "contract_address": self.contract_address, "patient_pk": self.patient_pk, "count": self.count}


@dataclass(frozen=True)
class Spend:
    contract_address: Digest
    op = "spend"

    def to_dict(self) -> dict:
        return {"op": self.op, "contract_address": self.contract_address}


@dataclass(frozen=True)
class AddIssuer:
    contract_address: Digest
    new_issuer_pk: bytes
    op = "add_issuer"

    def to_dict(self) -> dict:
        return {"op": self.op, "contract_address": self.contract_address, "new_issuer_pk": self.new_issuer_pk}


Command = Union[Deploy, Create, Spend, AddIssuer]


def command_from_dict(d: dict) -> Command:
    op = d.get("op")
    if op == "deploy" and d.keys() == {"op"}:
        return Deploy()
    if op == "create" and d.keys() == {"op", "contract_address", "patient_pk", "count"}:
        if type(d["count"]) is not int:
            raise LedgerError("malformed-tx", "count must be an integer")
        return Create(b64d(d["contract_address"]), b64d(d["patient_pk"]), d["count"])
    if op == "spend" and d.keys() == {"op", "contract_address"}:
        return Spend(b64d(d["contract_address"]))
    if op == "add_issuer" and d.keys() == {"op", "contract_address", "new_issuer_pk"}:
        return AddIssuer(b64d(d["contract_address"]), b64d(d["new_issuer_pk"]))
    raise LedgerError("malformed-tx", f"unknown command {d!r:.80}")


def contract_address(deployer_pk: bytes, deploy_nonce: int) -> Digest:
    return hash_canonical([deployer_pk, deploy_nonce])


# -- transactions and receipts ---------------------------------------------------


@dataclass(frozen=True)
class LedgerTransaction:
    sender: bytes
    nonce: int
    command: Command
    signature: bytes = field(repr=False)

    @staticmethod
    def signing_bytes_for(sender: bytes, nonce: int, command: Command) -> bytes:
        return canonical({"sender": sender, "nonce": nonce, "command": command.to_dict()})

    @classmethod
    def signed(cls, keypair: KeyPair, nonce: int, command: Command) -> "LedgerTransaction":
        msg = cls.signing_bytes_for(keypair.public_key, nonce, command)
        return cls(keypair.public_key, nonce, command, keypair.sign(msg))

    def signature_valid(self) -> bool:
        return check_signature(self.sender, self.signing_bytes_for(self.sender, self.nonce, self.command), self.signature)

    def to_dict(self) -> dict:
        return {"sender": self.sender, "nonce": self.nonce, "command": self.command.to_dict(), "signature": self.signature}

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerTransaction":
        if type(d.get("nonce")) is not int:
            raise LedgerError("malformed-tx", "nonce must be an integer")
        return cls(b64d(d["sender"]), d["nonce"], command_from_dict(d["command"]), b64d(d["signature"]))


@dataclass(frozen=True)
class LedgerReceipt:
    height: int | None
    status: str
    error_code: str | None = None
    message: str | None = None
    remaining_redemptions: int | None = None
    contract_address: Digest | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = {"height": self.height, "status": self.status}
        for key in ("error_code", "message", "remaining_redemptions", "contract_address"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerReceipt":
        addr = d.get("contract_address")
        return cls(
            d["height"],
            d["status"],
            d.get("error_code"),
            d.get("message"),
            d.get("remaining_redemptions"),
            b64d(addr) if addr is not None else None,
        )


def _rejected(height, code, message=None, **kw) -> LedgerReceipt:
    return LedgerReceipt(height, "rejected", code, message or code, **kw)


# -- state -----------------------------------------------------------------------


@dataclass(frozen=True)
class PrescriptionToken:
    issuer: bytes
    remaining_redemptions: int


@dataclass
class ContractState:
    address: Digest
    admin: bytes
    issuers: set[bytes]
    prescriptions: dict[bytes, PrescriptionToken] = field(default_factory=dict)

    def snapshot(self) -> "ContractSnapshot":
        return ContractSnapshot(self.address, self.admin, frozenset(self.issuers), dict(self.prescriptions))

    def to_dict(self) -> dict:
        return {
            "admin": self.admin,
            "issuers": sorted(self.issuers),
            "prescriptions": {
                pk.hex(): [tok.issuer, tok.remaining_redemptions] for pk, tok in sorted(self.prescriptions.items())
            },
        }


@dataclass(frozen=True)
class ContractSnapshot:
    address: Digest
    admin: bytes
    issuers: frozenset[bytes]
    prescriptions: dict[bytes, PrescriptionToken]


class StateMachine:
    """Sequential, deterministic application of transactions.

    Nonce freshness is checked here because it depends on the order. A tx
    whose nonce is not above the sender's last ordered nonce is rejected with
    ``stale-nonce`` and gets no height.
    """

    def __init__(self):
        self.contracts: dict[Digest, ContractState] = {}
        self.nonces: dict[bytes, int] = {}
        self.height = 0

    def apply(self, tx: LedgerTransaction) -> LedgerReceipt:
        if tx.nonce <= self.nonces.get(tx.sender, -1):
            return _rejected(None, "stale-nonce")
        self.nonces[tx.sender] = tx.nonce
        height = self.height
        self.height += 1
        cmd = tx.command
        if isinstance(cmd, Deploy):
            return self._deploy(height, tx.sender, tx.nonce)
        contract = self.contracts.get(cmd.contract_address)
        if contract is None:
            return _rejected(height, "unknown-contract")
        if isinstance(cmd, Create):
            return self._create(height, contract, tx.sender, cmd)
        if isinstance(cmd, Spend):
            return self._spend(height, contract, tx.sender)
        return self._add_issuer(height, contract, tx.sender, cmd)

    def _deploy(self, height, sender, nonce):
        address = contract_address(sender, nonce)
        self.contracts[address] = ContractState(address, sender, {sender})
        return LedgerReceipt(height, "ok", contract_address=address)

    def _create(self, height, contract, sender, cmd: Create):
        if sender not in contract.issuers:
            return _rejected(height, "not-authorized", NOT_ADMIN)
        if cmd.count < 1:
            return _rejected(height, "bad-count")
        if len(cmd.patient_pk) != KEY_SIZE:
            return _rejected(height, "bad-key")
        if cmd.patient_pk in contract.prescriptions:
            return _rejected(height, "duplicate-token")
        contract.prescriptions[cmd.patient_pk] = PrescriptionToken(sender, cmd.count)
        return LedgerReceipt(height, "ok", remaining_redemptions=cmd.count)

    def _spend(self, height, contract, sender):
        token = contract.prescriptions.get(sender)
        if token is None or token.remaining_redemptions < 1:
            return _rejected(height, "already-spent", ALREADY_SPENT, remaining_redemptions=0)
        left = token.remaining_redemptions - 1
        contract.prescriptions[sender] = PrescriptionToken(token.issuer, left)
        return LedgerReceipt(height, "ok", remaining_redemptions=left)

    def _add_issuer(self, height, contract, sender, cmd: AddIssuer):
        if sender != contract.admin:
            return _rejected(height, "not-authorized", NOT_ADMIN)
        if len(cmd.new_issuer_pk) != KEY_SIZE:
            return _rejected(height, "bad-key")
        contract.issuers.add(cmd.new_issuer_pk)
        return LedgerReceipt(height, "ok")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "contracts": {addr.hex(): c.to_dict() for addr, c in sorted(self.contracts.items())},
            "nonces": {pk.hex(): n for pk, n in sorted(self.nonces.items())},
        }

    def state_digest(self) -> Digest:
        return hash_canonical(self.to_dict())


# -- log ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    height: int
    tx: LedgerTransaction
    receipt: LedgerReceipt

    def to_bytes(self) -> bytes:
        return canonical({"height": self.height, "tx": self.tx.to_dict(), "receipt": self.receipt.to_dict()})

    @classmethod
    def from_bytes(cls, line: bytes) -> "LogEntry":
        d = canonical_parse(line)
        return cls(d["height"], LedgerTransaction.from_dict(d["tx"]), LedgerReceipt.from_dict(d["receipt"]))


def read_log(path: str | Path) -> list[LogEntry]:
    return [LogEntry.from_bytes(line) for line in Path(path).read_bytes().splitlines() if line]


@dataclass
class ReplayResult:
    state: StateMachine
    mismatches: list[int]


def replay(entries: Iterable[LogEntry | LedgerTransaction]) -> ReplayResult:
    """Re-apply a log from scratch. Recorded receipts are compared with the
    recomputed ones and differing heights reported in ``mismatches``."""
    sm = StateMachine()
    mismatches = []
    for entry in entries:
        tx = entry.tx if isinstance(entry, LogEntry) else entry
        if not tx.signature_valid():
            raise LedgerError("bad-signature", "log contains a transaction with an invalid signature")
        receipt = sm.apply(tx)
        if isinstance(entry, LogEntry) and (receipt != entry.receipt or receipt.height != entry.height):
            mismatches.append(entry.height)
    return ReplayResult(sm, mismatches)


# -- the threaded ledger -------------------------------------------------------


class _Pending:
    __slots__ = ("tx", "done", "receipt")

    def __init__(self, tx):
        self.tx = tx
        self.done = threading.Event()
        self.receipt = None


class Ledger:
    """Single-writer ledger. ``submit`` blocks until the transaction has been
    ordered and applied, and returns its receipt.

    Tokens are frozen values replaced wholesale by the applier, so
    :meth:`query_token` reads without taking a lock. Multi-field reads
    (snapshots, digests) take the state lock, which the applier holds once
    per block.
    """

    def __init__(self, log_path: str | Path | None = None, max_block: int = 256):
        self._sm = StateMachine()
        self._log: list[LogEntry] = []
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._state_lock = threading.Lock()
        self._senders_lock = threading.Lock()
        self._sender_locks: dict[bytes, threading.Lock] = {}
        self._next_nonce: dict[bytes, int] = {}
        self._max_block = max_block
        self._file = open(log_path, "ab") if log_path is not None else None
        self._closed = False
        self._thread = threading.Thread(target=self._run, name="ledger-applier", daemon=True)
        self._thread.start()

    # -- submission --------------------------------------------------------------

    def submit(self, tx: LedgerTransaction) -> LedgerReceipt:
        if self._closed:
            raise LedgerError("closed", "ledger is closed")
        if not tx.signature_valid():
            return _rejected(None, "bad-signature")
        with self._sender_lock(tx.sender):
            if tx.nonce >= self._next_nonce.get(tx.sender, 0):
                self._next_nonce[tx.sender] = tx.nonce + 1
            pending = self._enqueue(tx)
        pending.done.wait()
        return pending.receipt

    def send(self, keypair: KeyPair, command: Command) -> LedgerReceipt:
        """Client-side convenience: pick the sender's next nonce, sign and
        submit. Nonce choice and enqueueing are atomic per sender, so
        concurrent callers sharing one key (pharmacies racing on the same
        prescription key) are ordered by who gets there first."""
        if self._closed:
            raise LedgerError("closed", "ledger is closed")
        with self._sender_lock(keypair.public_key):
            nonce = self._next_nonce.get(keypair.public_key, 0)
            tx = LedgerTransaction.signed(keypair, nonce, command)
            self._next_nonce[keypair.public_key] = nonce + 1
            pending = self._enqueue(tx)
        pending.done.wait()
        return pending.receipt

    def next_nonce(self, sender: bytes) -> int:
        return self._next_nonce.get(sender, 0)

    def _sender_lock(self, sender: bytes) -> threading.Lock:
        lock = self._sender_locks.get(sender)
        if lock is None:
            with self._senders_lock:
                lock = self._sender_locks.setdefault(sender, threading.Lock())
        return lock

    def _enqueue(self, tx) -> _Pending:
        pending = _Pending(tx)
        self._queue.put(pending)
        return pending

    # -- applier ---------------------------------------------------------------------

    def _run(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            block = [item]
            while len(block) < self._max_block:
                try:
                    nxt = self._queue.get_nowait()
                except queue.Empty:
                    break
                if nxt is None:
                    self._queue.put(None)
                    break
                block.append(nxt)
            lines = []
            with self._state_lock:
                for pending in block:
                    receipt = self._sm.apply(pending.tx)
                    pending.receipt = receipt
                    if receipt.height is not None:
                        entry = LogEntry(receipt.height, pending.tx, receipt)
                        self._log.append(entry)
                        if self._file is not None:
                            lines.append(entry.to_bytes())
            if lines:
                self._file.write(b"\n".join(lines) + b"\n")
                self._file.flush()
            for pending in block:
                pending.done.set()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._queue.put(None)
            self._thread.join()
            if self._file is not None:
                self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- queries ------------------------------------------------------------------------

    def query_token(self, contract_address: Digest, patient_pk: bytes) -> PrescriptionToken | None:
        contract = self._sm.contracts.get(contract_address)
        if contract is None:
            return None
        return contract.prescriptions.get(patient_pk)

    def contract(self, contract_address: Digest) -> ContractSnapshot | None:
        with self._state_lock:
            contract = self._sm.contracts.get(contract_address)
            return contract.snapshot() if contract is not None else None

    @property
    def height(self) -> int:
        return self._sm.height

    def log(self) -> list[LogEntry]:
        with self._state_lock:
            return list(self._log)

    def state_digest(self) -> Digest:
        with self._state_lock:
            return self._sm.state_digest()

    def state_dict(self) -> dict:
        with self._state_lock:
            return self._sm.to_dict()
