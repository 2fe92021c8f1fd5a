"""Permissioned chain hosting the trade-clearing contract.

Normal nodes submit trade transactions; a proof-of-authority committee
produces blocks round-robin. Each block applies its transactions to the
contract in ``(sender, nonce)`` order, fires the clearing step once every
prosumer has submitted, and commits a SHA-256 digest of the resulting state.

All contract numbers are signed 64-bit fixed-point values with 1e-9
resolution, so replaying a chain reproduces every state digest bit for bit.

Canonical byte layout (all integers big-endian):

* transaction: kind ``u8`` (0 trades, 1 vote, 2 genesis), sender ``u32``,
  role ``u8`` (0 normal, 1 poa), iteration ``u64``, nonce ``u64``, then the
  payload. Trades: ``T u32, N u32`` and ``T*N`` ``i64`` values row by row.
  Vote: candidate ``u32``, action ``u8`` (0 add, 1 remove). Genesis:
  ``N u32, T u32``, rho, eps_primal and eps_dual as ``i64`` fixed point,
  max_iterations ``u32``, committee length ``u32`` and member ``u32``s.
* block: height ``u64``, producer ``u32`` and role ``u8``, transaction count
  ``u32``, each transaction as ``u32`` length plus bytes, parent digest, state
  digest (32 bytes each).
* state: settings, iteration ``u64``, the tensors ``lam``, ``p_hat``,
  ``p_hat_prev`` and ``trades`` (``i64``, ``[i, j, t]`` order), the received
  set, committee, pending votes and last nonce per node.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from . import fixedpoint as fx
from .coordinator import (
    ACCEPTED,
    REJECTED_DUPLICATE,
    REJECTED_INVALID,
    REJECTED_STALE,
    CoordinatorState,
)
from .model import AdmmSettings, ModelError

NORMAL, POA = "normal", "poa"
SUBMIT_TRADES, VOTE, GENESIS = "SubmitTrades", "Vote", "Genesis"
ADD, REMOVE = "add", "remove"

REJECTED_TURN = "rejected-turn"
REJECTED_FORK = "rejected-fork"
REJECTED_NOT_POA = "rejected-not-poa"
REJECTED_EMPTY = "rejected-empty-committee"

ZERO_HASH = bytes(32)
_KINDS = {SUBMIT_TRADES: 0, VOTE: 1, GENESIS: 2}
_ROLES = {NORMAL: 0, POA: 1}
_ACTIONS = {ADD: 0, REMOVE: 1}


class LedgerError(RuntimeError):
    """Raised for rejected blocks and votes; ``code`` is the machine-readable reason."""

    def __init__(self, code: str, message: str = "", height: Optional[int] = None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.height = height


@dataclass(frozen=True)
class NodeId:
    index: int
    role: str = NORMAL

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ModelError(f"node role must be 'normal' or 'poa', got {self.role!r}")
        if self.index < 0:
            raise ModelError("node index must be >= 0")


@dataclass(frozen=True, eq=False)
class Transaction:
    """``payload`` is an int64 ``T x N`` fixed-point matrix, ``(candidate, action)`` or a genesis dict."""

    kind: str
    sender: NodeId
    iteration: int
    payload: object
    nonce: int

    def to_bytes(self) -> bytes:
        head = struct.pack(">BIBQQ", _KINDS[self.kind], self.sender.index, _ROLES[self.sender.role],
                           self.iteration, self.nonce)
        if self.kind == SUBMIT_TRADES:
            m = np.asarray(self.payload, dtype=np.int64)
            return head + struct.pack(">II", *m.shape) + m.astype(">i8").tobytes()
        if self.kind == VOTE:
            cand, action = self.payload
            return head + struct.pack(">IB", cand, _ACTIONS[action])
        g = self.payload
        out = head + struct.pack(">IIqqqII", g["N"], g["T"], g["rho"], g["eps_primal"], g["eps_dual"],
                                 g["max_iterations"], len(g["committee"]))
        return out + b"".join(struct.pack(">I", c) for c in g["committee"])

    def to_json(self) -> dict:
        if self.kind == SUBMIT_TRADES:
            payload = np.asarray(self.payload, dtype=np.int64).tolist()
        elif self.kind == VOTE:
            payload = {"candidate": self.payload[0], "action": self.payload[1]}
        else:
            payload = {k: self.payload[k] for k in _GENESIS_KEYS}
        return {"kind": self.kind, "sender": {"index": self.sender.index, "role": self.sender.role},
                "iteration": self.iteration, "payload": payload, "nonce": self.nonce}


_GENESIS_KEYS = ("N", "T", "rho", "eps_primal", "eps_dual", "max_iterations", "committee")


def trades_tx(sender: NodeId, iteration: int, trades: np.ndarray, nonce: int) -> Transaction:
    """Wrap a float ``T x N`` trade matrix as a fixed-point transaction."""
    return Transaction(SUBMIT_TRADES, sender, iteration, fx.encode(trades), nonce)


def vote_tx(sender: NodeId, candidate: int, action: str, nonce: int, iteration: int = 0) -> Transaction:
    return Transaction(VOTE, sender, iteration, (int(candidate), action), nonce)


def _digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    producer: NodeId
    txs: tuple
    parent_hash: bytes
    state_hash: bytes
    block_hash: bytes

    @staticmethod
    def header_bytes(height, producer, txs, parent_hash, state_hash) -> bytes:
        parts = [struct.pack(">QIBI", height, producer.index, _ROLES[producer.role], len(txs))]
        for tx in txs:
            b = tx.to_bytes()
            parts.append(struct.pack(">I", len(b)) + b)
        parts += [parent_hash, state_hash]
        return b"".join(parts)

    @classmethod
    def seal(cls, height, producer, txs, parent_hash, state_hash) -> "Block":
        txs = tuple(txs)
        h = _digest(cls.header_bytes(height, producer, txs, parent_hash, state_hash))
        return cls(height, producer, txs, parent_hash, state_hash, h)

    def computed_hash(self) -> bytes:
        return _digest(self.header_bytes(self.height, self.producer, self.txs, self.parent_hash, self.state_hash))

    def to_json(self) -> str:
        obj = {
            "height": self.height,
            "producer": {"index": self.producer.index, "role": self.producer.role},
            "txs": [tx.to_json() for tx in self.txs],
            "parent_hash": self.parent_hash.hex(),
            "state_hash": self.state_hash.hex(),
            "block_hash": self.block_hash.hex(),
        }
        return json.dumps(obj, separators=(",", ":"))


@dataclass
class ContractState:
    """Contract storage. Tensors are int64 fixed point indexed ``[i, j, t]``."""

    settings: AdmmSettings
    N: int
    T: int
    rho_units: int
    iteration: int
    lam: np.ndarray
    p_hat: np.ndarray
    p_hat_prev: np.ndarray
    trades: np.ndarray
    received: set = field(default_factory=set)
    committee: list = field(default_factory=list)
    votes: dict = field(default_factory=dict)  # (candidate, action) -> set of voters
    nonces: dict = field(default_factory=dict)

    @property
    def coordinator(self) -> CoordinatorState:
        st = CoordinatorState(self.iteration, fx.decode(self.lam), fx.decode(self.p_hat),
                              fx.decode(self.trades), fx.decode(self.p_hat_prev))
        st.r_primal, st.r_dual = self.residuals()
        return st

    def residuals(self) -> tuple[float, float]:
        return fx.residuals_fixed(self.p_hat, self.trades, self.p_hat_prev, self.rho_units)

    def to_bytes(self) -> bytes:
        s = self.settings
        parts = [struct.pack(">IIqqqIQ", self.N, self.T, self.rho_units, fx.encode_scalar(s.eps_primal),
                             fx.encode_scalar(s.eps_dual), s.max_iterations, self.iteration)]
        for a in (self.lam, self.p_hat, self.p_hat_prev, self.trades):
            parts.append(np.ascontiguousarray(a, dtype=np.int64).astype(">i8").tobytes())
        parts.append(_u32_list(sorted(self.received)))
        parts.append(_u32_list(self.committee))
        keys = sorted(k for k, v in self.votes.items() if v)
        parts.append(struct.pack(">I", len(keys)))
        for cand, action in keys:
            parts.append(struct.pack(">IB", cand, _ACTIONS[action]) + _u32_list(sorted(self.votes[(cand, action)])))
        parts.append(struct.pack(">I", len(self.nonces)))
        for node in sorted(self.nonces):
            parts.append(struct.pack(">IQ", node, self.nonces[node]))
        return b"".join(parts)

    def digest(self) -> bytes:
        return _digest(self.to_bytes())


def _u32_list(xs) -> bytes:
    xs = list(xs)
    return struct.pack(">I", len(xs)) + b"".join(struct.pack(">I", x) for x in xs)


def default_committee(N: int) -> list[int]:
    return list(range(max(1, math.ceil(N / 3))))


class SmartContract:
    """The three contract functions plus committee membership voting."""

    def __init__(self, N: int, T: int, settings: AdmmSettings, committee: Optional[Iterable[int]] = None):
        committee = sorted(set(default_committee(N) if committee is None else committee))
        if not committee or any(not 0 <= c < N for c in committee):
            raise ModelError("committee must be a nonempty subset of the nodes")
        z = np.zeros((N, N, T), dtype=np.int64)
        self.state = ContractState(settings, N, T, fx.encode_scalar(settings.rho), 0,
                                   z.copy(), z.copy(), z.copy(), z.copy(), committee=committee)

    @property
    def N(self) -> int:
        return self.state.N

    @property
    def T(self) -> int:
        return self.state.T

    def role(self, index: int) -> str:
        return POA if index in self.state.committee else NORMAL

    def _nonce_ok(self, tx: Transaction) -> bool:
        return tx.nonce > self.state.nonces.get(tx.sender.index, 0)

    def submit_trades(self, tx: Transaction) -> str:
        s = self.state
        i = tx.sender.index
        if tx.kind != SUBMIT_TRADES or not 0 <= i < s.N:
            return REJECTED_INVALID
        if tx.iteration != s.iteration:
            return REJECTED_STALE
        if i in s.received:
            return REJECTED_DUPLICATE
        m = np.asarray(tx.payload)
        if (m.shape != (s.T, s.N) or m.dtype != np.int64 or np.any(m[:, i] != 0)
                or tx.sender.role != self.role(i) or not self._nonce_ok(tx)):
            return REJECTED_INVALID
        s.trades[i] = m.T
        s.received.add(i)
        s.nonces[i] = tx.nonce
        return ACCEPTED

    def try_execute(self) -> bool:
        s = self.state
        if len(s.received) < s.N:
            return False
        p_hat, lam = fx.sct_update_fixed(s.lam, s.trades, s.rho_units)
        s.p_hat_prev, s.p_hat, s.lam = s.p_hat, p_hat, lam
        s.iteration += 1
        s.received = set()
        return True

    def read_state(self, prosumer: Union[int, NodeId]) -> tuple[np.ndarray, np.ndarray, int]:
        i = prosumer.index if isinstance(prosumer, NodeId) else int(prosumer)
        if not 0 <= i < self.N:
            raise ModelError(f"unknown prosumer {i}")
        s = self.state
        return fx.decode(s.lam[i].T), fx.decode(s.p_hat[i].T), s.iteration

    def vote_membership(self, tx: Transaction) -> tuple[int, ...]:
        """Record a vote; apply it once a strict majority of the committee agrees."""
        s = self.state
        voter = tx.sender.index
        if tx.kind != VOTE:
            raise LedgerError(REJECTED_INVALID, "not a vote")
        if voter not in s.committee or tx.sender.role != POA:
            raise LedgerError(REJECTED_NOT_POA, f"node {voter} is not on the committee")
        cand, action = tx.payload
        if action not in _ACTIONS or not 0 <= cand < s.N or not self._nonce_ok(tx):
            raise LedgerError(REJECTED_INVALID, "bad vote")
        if (action == ADD) == (cand in s.committee):
            raise LedgerError(REJECTED_INVALID, f"node {cand} membership already as requested")
        if action == REMOVE and s.committee == [cand]:
            raise LedgerError(REJECTED_EMPTY, "cannot remove the last committee member")
        s.nonces[voter] = tx.nonce
        tally = s.votes.setdefault((cand, action), set())
        tally.add(voter)
        if len(tally) > len(s.committee) / 2:
            members = set(s.committee)
            members = members | {cand} if action == ADD else members - {cand}
            s.committee = sorted(members)
            s.votes = {}
        return tuple(s.committee)

    def apply(self, tx: Transaction) -> str:
        if tx.kind == SUBMIT_TRADES:
            return self.submit_trades(tx)
        if tx.kind == VOTE:
            try:
                self.vote_membership(tx)
            except LedgerError as exc:
                return exc.code
            return ACCEPTED
        return REJECTED_INVALID


def _genesis_payload(N, T, settings: AdmmSettings, committee) -> dict:
    return {"N": N, "T": T, "rho": fx.encode_scalar(settings.rho),
            "eps_primal": fx.encode_scalar(settings.eps_primal), "eps_dual": fx.encode_scalar(settings.eps_dual),
            "max_iterations": settings.max_iterations, "committee": list(committee)}


def _contract_from_genesis(g: dict) -> SmartContract:
    settings = AdmmSettings(rho=g["rho"] / fx.SCALE, eps_primal=g["eps_primal"] / fx.SCALE,
                            eps_dual=g["eps_dual"] / fx.SCALE, max_iterations=g["max_iterations"])
    c = SmartContract(g["N"], g["T"], settings, g["committee"])
    # keep the exact on-chain encodings rather than the float round trip
    c.state.rho_units = g["rho"]
    return c


class Ledger:
    """Single honest chain plus its contract. Reads see committed state only."""

    def __init__(self, N: int, T: int, settings: Optional[AdmmSettings] = None,
                 committee: Optional[Iterable[int]] = None):
        settings = settings or AdmmSettings()
        committee = sorted(set(default_committee(N) if committee is None else committee))
        g = _genesis_payload(N, T, settings, committee)
        self.contract = _contract_from_genesis(g)
        founder = NodeId(committee[0], POA)
        genesis = Block.seal(0, founder, [Transaction(GENESIS, founder, 0, g, 0)], ZERO_HASH,
                             self.contract.state.digest())
        self.chain: list[Block] = [genesis]

    @property
    def height(self) -> int:
        """Height of the next block."""
        return len(self.chain)

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    @property
    def committee(self) -> tuple[int, ...]:
        return tuple(self.contract.state.committee)

    def expected_producer(self, height: Optional[int] = None) -> int:
        c = self.contract.state.committee
        return c[(self.height if height is None else height) % len(c)]

    def node(self, index: int) -> NodeId:
        return NodeId(index, self.contract.role(index))

    def produce_block(self, producer: Union[int, NodeId], mempool: Iterable[Transaction],
                      parent_hash: Optional[bytes] = None) -> tuple[Block, list[str]]:
        """Apply the mempool and append a block.

        Returns the block and one status per transaction in applied order.
        Rejected transactions are left out of the block.
        """
        idx = producer.index if isinstance(producer, NodeId) else int(producer)
        if parent_hash is not None and parent_hash != self.tip.block_hash:
            raise LedgerError(REJECTED_FORK, "parent is not the chain tip", self.height)
        if idx != self.expected_producer():
            raise LedgerError(REJECTED_TURN, f"node {idx} may not produce height {self.height}", self.height)
        included, statuses = [], []
        for tx in sorted(mempool, key=lambda t: (t.sender.index, t.nonce)):
            status = self.contract.apply(tx)
            statuses.append(status)
            if status == ACCEPTED:
                included.append(tx)
        self.contract.try_execute()
        block = Block.seal(self.height, NodeId(idx, POA), included, self.tip.block_hash,
                           self.contract.state.digest())
        self.chain.append(block)
        return block, statuses

    def export(self) -> str:
        return "".join(b.to_json() + "\n" for b in self.chain)


# verification -----------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    valid: bool
    height: Optional[int] = None
    reason: Optional[str] = None

    def __str__(self):
        return "valid" if self.valid else f"invalid height={self.height} reason={self.reason}"


def verify_chain(chain: list[Block]) -> Verdict:
    """Replay ``chain`` from genesis and check links, producer turns and state digests."""
    if not chain:
        return Verdict(False, 0, "empty-chain")
    g = chain[0]
    if (g.height != 0 or g.parent_hash != ZERO_HASH or len(g.txs) != 1 or g.txs[0].kind != GENESIS):
        return Verdict(False, 0, "genesis-invalid")
    try:
        contract = _contract_from_genesis(g.txs[0].payload)
    except (ModelError, KeyError, TypeError, ValueError):
        return Verdict(False, 0, "genesis-invalid")
    if g.producer != NodeId(contract.state.committee[0], POA) or g.txs[0].sender != g.producer:
        return Verdict(False, 0, "producer-turn")
    if contract.state.digest() != g.state_hash:
        return Verdict(False, 0, "state-hash-mismatch")
    if g.computed_hash() != g.block_hash:
        return Verdict(False, 0, "block-hash-mismatch")
    prev = g
    for h, b in enumerate(chain[1:], start=1):
        if b.height != h:
            return Verdict(False, h, "height-mismatch")
        if b.parent_hash != prev.block_hash:
            return Verdict(False, h, "hash-link")
        c = contract.state.committee
        if b.producer != NodeId(c[h % len(c)], POA):
            return Verdict(False, h, "producer-turn")
        keys = [(tx.sender.index, tx.nonce) for tx in b.txs]
        if keys != sorted(keys):
            return Verdict(False, h, "tx-order")
        for tx in b.txs:
            if contract.apply(tx) != ACCEPTED:
                return Verdict(False, h, "tx-rejected")
        contract.try_execute()
        if contract.state.digest() != b.state_hash:
            return Verdict(False, h, "state-hash-mismatch")
        if b.computed_hash() != b.block_hash:
            return Verdict(False, h, "block-hash-mismatch")
        prev = b
    return Verdict(True)


class ChainFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line + 1}: {message}")
        self.line = line


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate key")
    return dict(pairs)


def _expect(cond: bool, what: str):
    if not cond:
        raise ValueError(what)


def _int(v, lo=0, hi=2**64 - 1) -> int:
    _expect(type(v) is int and lo <= v <= hi, "integer out of range")
    return v


def _digest_hex(v) -> bytes:
    _expect(isinstance(v, str) and len(v) == 64 and all(ch in "0123456789abcdef" for ch in v),
            "digest must be 64 lowercase hex digits")
    return bytes.fromhex(v)


def _node(obj) -> NodeId:
    _expect(isinstance(obj, dict) and set(obj) == {"index", "role"} and obj["role"] in _ROLES, "bad node")
    return NodeId(_int(obj["index"], hi=2**32 - 1), obj["role"])


def _tx(obj) -> Transaction:
    _expect(isinstance(obj, dict) and set(obj) == {"kind", "sender", "iteration", "payload", "nonce"}, "bad tx")
    kind = obj["kind"]
    _expect(kind in _KINDS, "unknown transaction kind")
    p = obj["payload"]
    if kind == SUBMIT_TRADES:
        _expect(isinstance(p, list) and p and all(isinstance(r, list) and len(r) == len(p[0]) for r in p),
                "trade payload must be a matrix")
        payload = np.array([[_int(v, fx.INT64_MIN, fx.INT64_MAX) for v in r] for r in p], dtype=np.int64)
    elif kind == VOTE:
        _expect(isinstance(p, dict) and set(p) == {"candidate", "action"} and p["action"] in _ACTIONS, "bad vote")
        payload = (_int(p["candidate"], hi=2**32 - 1), p["action"])
    else:
        _expect(isinstance(p, dict) and set(p) == set(_GENESIS_KEYS), "bad genesis payload")
        payload = {k: (list(map(_int, p[k])) if k == "committee" else _int(p[k], fx.INT64_MIN, fx.INT64_MAX))
                   for k in _GENESIS_KEYS}
        _expect(isinstance(p["committee"], list), "bad committee")
    return Transaction(kind, _node(obj["sender"]), _int(obj["iteration"]), payload, _int(obj["nonce"]))


def parse_block(line: Union[str, bytes]) -> Block:
    obj = json.loads(line, object_pairs_hook=_no_duplicates)
    _expect(isinstance(obj, dict) and list(obj) == ["height", "producer", "txs", "parent_hash", "state_hash",
                                                    "block_hash"], "bad block fields")
    _expect(isinstance(obj["txs"], list), "txs must be a list")
    return Block(_int(obj["height"]), _node(obj["producer"]), tuple(_tx(t) for t in obj["txs"]),
                 _digest_hex(obj["parent_hash"]), _digest_hex(obj["state_hash"]), _digest_hex(obj["block_hash"]))


def import_chain(data: Union[str, bytes]) -> list[Block]:
    """Parse newline-delimited JSON; raises :class:`ChainFormatError` naming the bad line."""
    raw = data.encode() if isinstance(data, str) else bytes(data)
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    chain = []
    for k, line in enumerate(lines):
        try:
            chain.append(parse_block(line.decode("utf-8", errors="strict")))
        except (ValueError, TypeError, UnicodeDecodeError, ModelError) as exc:
            raise ChainFormatError(k, str(exc)) from exc
    return chain


def verify_export(data: Union[str, bytes]) -> Verdict:
    """Verify an exported chain; unparsable lines fail at the height of that line."""
    try:
        chain = import_chain(data)
    except ChainFormatError as exc:
        return Verdict(False, exc.line, "malformed")
    return verify_chain(chain)


# coordinator adapter ----------------------------------------------------

class LedgerHandle:
    """Runs the coordinator's contract calls through a :class:`Ledger`.

    Submissions are checked against committed state and queued; ``commit``
    has the scheduled committee member produce a block from the queue.
    """

    def __init__(self, N: int, T: int, settings: Optional[AdmmSettings] = None,
                 committee: Optional[Iterable[int]] = None):
        self.ledger = Ledger(N, T, settings, committee)
        self.N, self.T = N, T
        self.mempool: list[Transaction] = []
        self._next_nonce = [1] * N

    def submit_trades(self, prosumer: int, iteration: int, trades: np.ndarray) -> str:
        s = self.ledger.contract.state
        if iteration != s.iteration:
            return REJECTED_STALE
        if any(tx.sender.index == prosumer for tx in self.mempool) or prosumer in s.received:
            return REJECTED_DUPLICATE
        m = np.asarray(trades, dtype=float)
        if m.shape != (self.T, self.N) or not np.all(np.isfinite(m)) or np.any(m[:, prosumer] != 0):
            return REJECTED_INVALID
        tx = trades_tx(self.ledger.node(prosumer), iteration, m, self._next_nonce[prosumer])
        self._next_nonce[prosumer] += 1
        self.mempool.append(tx)
        return ACCEPTED

    def read_state(self, prosumer: int) -> tuple[np.ndarray, np.ndarray, int]:
        return self.ledger.contract.read_state(prosumer)

    def commit(self) -> None:
        txs, self.mempool = self.mempool, []
        _, statuses = self.ledger.produce_block(self.ledger.expected_producer(), txs)
        bad = [s for s in statuses if s != ACCEPTED]
        if bad:
            raise LedgerError(bad[0], "queued transaction rejected in block", self.ledger.height - 1)

    def residuals(self) -> tuple[float, float]:
        return self.ledger.contract.state.residuals()

    def snapshot(self) -> CoordinatorState:
        return self.ledger.contract.state.coordinator

    def export(self) -> str:
        return self.ledger.export()
