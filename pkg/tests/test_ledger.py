import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rxledger.crypto_core import hash_canonical, keygen, random_keypair
from rxledger.errors import LedgerError
from rxledger.ledger import (
    ALREADY_SPENT,
    NOT_ADMIN,
    AddIssuer,
    Create,
    Deploy,
    Ledger,
    LedgerReceipt,
    LedgerTransaction,
    LogEntry,
    Spend,
    StateMachine,
    command_from_dict,
    contract_address,
    read_log,
    replay,
)

KEYS = [keygen(bytes([i]) * 32) for i in range(1, 7)]


class ReferenceLedger:
    """Brute-force sequential interpreter over plain maps."""

    def __init__(self):
        self.contracts = {}
        self.nonces = {}
        self.height = 0

    def apply(self, sender, nonce, cmd):
        if nonce <= self.nonces.get(sender, -1):
            return ("rejected", "stale-nonce", None, None)
        self.nonces[sender] = nonce
        self.height += 1
        if isinstance(cmd, Deploy):
            addr = hash_canonical([sender, nonce])
            self.contracts[addr] = {"admin": sender, "issuers": {sender}, "tokens": {}}
            return ("ok", None, None, None)
        c = self.contracts.get(cmd.contract_address)
        if c is None:
            return ("rejected", "unknown-contract", None, None)
        if isinstance(cmd, Create):
            if sender not in c["issuers"]:
                return ("rejected", "not-authorized", NOT_ADMIN, None)
            if cmd.count < 1:
                return ("rejected", "bad-count", None, None)
            if len(cmd.patient_pk) != 32:
                return ("rejected", "bad-key", None, None)
            if cmd.patient_pk in c["tokens"]:
                return ("rejected", "duplicate-token", None, None)
            c["tokens"][cmd.patient_pk] = [sender, cmd.count]
            return ("ok", None, None, cmd.count)
        if isinstance(cmd, Spend):
            tok = c["tokens"].get(sender)
            if tok is None or tok[1] < 1:
                return ("rejected", "already-spent", ALREADY_SPENT, 0)
            tok[1] -= 1
            return ("ok", None, None, tok[1])
        if sender != c["admin"]:
            return ("rejected", "not-authorized", NOT_ADMIN, None)
        if len(cmd.new_issuer_pk) != 32:
            return ("rejected", "bad-key", None, None)
        c["issuers"].add(cmd.new_issuer_pk)
        return ("ok", None, None, None)

    def digest(self):
        return hash_canonical({
            "height": self.height,
            "contracts": {
                a.hex(): {
                    "admin": c["admin"],
                    "issuers": sorted(c["issuers"]),
                    "prescriptions": {pk.hex(): list(t) for pk, t in sorted(c["tokens"].items())},
                }
                for a, c in sorted(self.contracts.items())
            },
            "nonces": {pk.hex(): n for pk, n in sorted(self.nonces.items())},
        })


def random_program(r, length):
    """Random (sender index, nonce, command) triples over a small key pool,
    with occasional stale nonces and unknown contracts."""
    addresses = [bytes(32)]
    next_nonce = {}
    program = []
    for _ in range(length):
        s = r.randrange(len(KEYS))
        pk = KEYS[s].public_key
        nonce = next_nonce.get(pk, 0)
        if r.random() < 0.05 and nonce > 0:
            nonce = r.randrange(nonce)  # stale
        else:
            next_nonce[pk] = nonce + 1
        roll = r.random()
        if roll < 0.15:
            cmd = Deploy()
            addresses.append(contract_address(pk, nonce))
        elif roll < 0.5:
            cmd = Create(r.choice(addresses), r.choice(KEYS).public_key, r.choice([0, 1, 1, 2, 3]))
        elif roll < 0.85:
            cmd = Spend(r.choice(addresses))
        else:
            cmd = AddIssuer(r.choice(addresses), r.choice(KEYS).public_key)
        program.append((s, nonce, cmd))
    return program


def check_program(program, ledger):
    ref = ReferenceLedger()
    for s, nonce, cmd in program:
        kp = KEYS[s]
        receipt = ledger.submit(LedgerTransaction.signed(kp, nonce, cmd))
        want = ref.apply(kp.public_key, nonce, cmd)
        status, code, message, remaining = want
        want = (status, code, message or code, remaining)
        got = (receipt.status, receipt.error_code, receipt.message, receipt.remaining_redemptions)
        assert got == want, (cmd, got, want)
    assert ledger.state_digest() == ref.digest()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 60))
def test_matches_reference_interpreter(seed, length):
    with Ledger() as ledger:
        check_program(random_program(random.Random(seed), length), ledger)


# -- contract semantics ----------------------------------------------------------------


@pytest.fixture
def ledger():
    with Ledger() as lg:
        yield lg


def test_admin_only_create(ledger):
    admin, other, token = KEYS[0], KEYS[1], KEYS[2]
    addr = ledger.send(admin, Deploy()).contract_address
    r = ledger.send(other, Create(addr, token.public_key, 1))
    assert (r.status, r.error_code, r.message) == ("rejected", "not-authorized", NOT_ADMIN)
    assert r.message == "Sender is not the admin of the contract"
    assert ledger.query_token(addr, token.public_key) is None
    assert ledger.send(admin, Create(addr, token.public_key, 1)).ok


def test_decrement_guard(ledger):
    admin, token = KEYS[0], KEYS[2]
    addr = ledger.send(admin, Deploy()).contract_address
    assert ledger.send(admin, Create(addr, token.public_key, 3)).remaining_redemptions == 3
    assert [ledger.send(token, Spend(addr)).remaining_redemptions for _ in range(3)] == [2, 1, 0]
    r = ledger.send(token, Spend(addr))
    assert (r.status, r.message, r.remaining_redemptions) == ("rejected", "Already spent", 0)
    assert r.height is not None
    assert ledger.query_token(addr, token.public_key).remaining_redemptions == 0


def test_unknown_key_spend_is_already_spent(ledger):
    addr = ledger.send(KEYS[0], Deploy()).contract_address
    r = ledger.send(KEYS[3], Spend(addr))
    assert r.message == ALREADY_SPENT
    r = ledger.send(KEYS[3], Spend(bytes(32)))
    assert r.error_code == "unknown-contract"


def test_add_issuer_delegation(ledger):
    admin, delegate, outsider = KEYS[0], KEYS[1], KEYS[2]
    addr = ledger.send(admin, Deploy()).contract_address
    r = ledger.send(outsider, AddIssuer(addr, outsider.public_key))
    assert (r.error_code, r.message) == ("not-authorized", NOT_ADMIN)
    assert ledger.send(admin, AddIssuer(addr, delegate.public_key)).ok
    digest = ledger.state_digest()
    assert ledger.send(admin, AddIssuer(addr, delegate.public_key)).ok
    assert ledger.contract(addr).issuers == {admin.public_key, delegate.public_key}
    assert ledger.state_digest() != digest  # only the admin's nonce moved
    assert ledger.send(delegate, Create(addr, KEYS[4].public_key, 1)).ok
    r = ledger.send(delegate, AddIssuer(addr, outsider.public_key))
    assert r.message == NOT_ADMIN
    assert ledger.query_token(addr, KEYS[4].public_key).issuer == delegate.public_key


def test_create_validation(ledger):
    admin = KEYS[0]
    addr = ledger.send(admin, Deploy()).contract_address
    assert ledger.send(admin, Create(addr, KEYS[1].public_key, 0)).error_code == "bad-count"
    assert ledger.send(admin, Create(addr, b"short", 1)).error_code == "bad-key"
    assert ledger.send(admin, Create(addr, KEYS[1].public_key, 1)).ok
    assert ledger.send(admin, Create(addr, KEYS[1].public_key, 5)).error_code == "duplicate-token"


def test_overwrite_semantics_would_allow_reissue():
    """Under plain overwrite a spent token can be refilled for the same key;
    the ledger refuses that."""
    admin, token = KEYS[0], KEYS[1]
    overwrite_tokens = {token.public_key: 1}
    overwrite_tokens[token.public_key] -= 1
    overwrite_tokens[token.public_key] = 1  # second create with the same key
    assert overwrite_tokens[token.public_key] == 1
    with Ledger() as lg:
        addr = lg.send(admin, Deploy()).contract_address
        lg.send(admin, Create(addr, token.public_key, 1))
        assert lg.send(token, Spend(addr)).ok
        assert lg.send(admin, Create(addr, token.public_key, 1)).error_code == "duplicate-token"
        assert lg.send(token, Spend(addr)).message == ALREADY_SPENT


def test_distinct_deploy_addresses(ledger):
    a = ledger.send(KEYS[0], Deploy()).contract_address
    b = ledger.send(KEYS[0], Deploy()).contract_address
    assert a != b
    assert a == contract_address(KEYS[0].public_key, 0)


# -- submission checks -----------------------------------------------------------------


def test_bad_signature_and_stale_nonce_get_no_height(ledger):
    tx = LedgerTransaction.signed(KEYS[0], 0, Deploy())
    forged = LedgerTransaction(tx.sender, tx.nonce, tx.command, bytes(64))
    r = ledger.submit(forged)
    assert (r.error_code, r.height) == ("bad-signature", None)
    assert ledger.submit(tx).height == 0
    r = ledger.submit(tx)
    assert (r.error_code, r.height) == ("stale-nonce", None)
    assert ledger.height == 1


def test_nonce_gaps_allowed(ledger):
    assert ledger.submit(LedgerTransaction.signed(KEYS[0], 5, Deploy())).ok
    assert ledger.submit(LedgerTransaction.signed(KEYS[0], 3, Deploy())).error_code == "stale-nonce"
    assert ledger.next_nonce(KEYS[0].public_key) == 6


def test_closed_ledger_refuses():
    lg = Ledger()
    lg.close()
    with pytest.raises(LedgerError):
        lg.send(KEYS[0], Deploy())


@pytest.mark.parametrize("d", [
    {"op": "spend"},
    {"op": "nope"},
    {"op": "create", "contract_address": "AA", "patient_pk": "AA", "count": "1"},
    {"op": "deploy", "extra": 1},
])
def test_command_from_dict_strict(d):
    with pytest.raises(LedgerError):
        command_from_dict(d)


# -- log and replay ---------------------------------------------------------------------


def test_replay_reproduces_state(tmp_path):
    path = tmp_path / "ledger.ndjson"
    program = random_program(random.Random(99), 200)
    with Ledger(path) as lg:
        for s, nonce, cmd in program:
            lg.submit(LedgerTransaction.signed(KEYS[s], nonce, cmd))
        live = lg.state_digest()
        in_memory = lg.log()
    entries = read_log(path)
    assert [e.to_bytes() for e in entries] == [e.to_bytes() for e in in_memory]
    assert [e.height for e in entries] == list(range(len(entries)))
    result = replay(entries)
    assert result.mismatches == []
    assert result.state.state_digest() == live
    assert replay(entries).state.state_digest() == live


def test_replay_flags_doctored_receipt():
    with Ledger() as lg:
        addr = lg.send(KEYS[0], Deploy()).contract_address
        lg.send(KEYS[0], Create(addr, KEYS[1].public_key, 1))
        entries = lg.log()
    doctored = LogEntry(1, entries[1].tx, LedgerReceipt(1, "ok", remaining_redemptions=9))
    assert replay([entries[0], doctored]).mismatches == [1]


def test_replay_refuses_forged_transaction():
    tx = LedgerTransaction(KEYS[0].public_key, 0, Deploy(), bytes(64))
    with pytest.raises(LedgerError):
        replay([tx])


def test_state_machine_is_pure_function_of_log():
    program = random_program(random.Random(3), 100)
    txs = [LedgerTransaction.signed(KEYS[s], n, c) for s, n, c in program]
    a, b = StateMachine(), StateMachine()
    ra = [a.apply(t) for t in txs]
    rb = [b.apply(t) for t in txs]
    assert ra == rb and a.state_digest() == b.state_digest()


# -- concurrency --------------------------------------------------------------------------


def test_concurrent_writers_keep_accounting():
    with Ledger() as lg:
        admins = [random_keypair(random.Random(i)) for i in range(6)]
        addrs = [lg.send(a, Deploy()).contract_address for a in admins]
        counts = [0] * len(admins)

        def work(i):
            r = random.Random(100 + i)
            for _ in range(80):
                if lg.send(admins[i], Create(addrs[i], r.randbytes(32), 1)).ok:
                    counts[i] += 1

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(admins))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert counts == [80] * len(admins)
        assert lg.height == len(admins) * 81
        assert sum(len(lg.contract(a).prescriptions) for a in addrs) == len(admins) * 80
        assert replay(lg.log()).state.state_digest() == lg.state_digest()
