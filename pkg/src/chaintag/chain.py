"""In-memory chain store: ingestion, indexing, and lookups.

The input format is one JSON block record per line:

    {"height": 0, "hash": "...", "time": "YYYY-MM-DDTHH:MM:SSZ",
     "txes": [{"hash": "...",
               "inputs":  [{"address": "...", "value": 123}],
               "outputs": [{"address": "...", "value": 120}]}]}

Values are integer satoshi (10^8 per coin). Unknown keys are ignored.
After ingestion the handle is immutable and safe to share across
readers; every lookup is a dict access.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .addresses import BITCOIN, CurrencyProfile

logger = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

COIN = 10**8  # satoshi per BTC


class ChainError(Exception):
    pass


class ChainFormatError(ChainError):
    """Malformed chain input; `line` is the 1-based offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownTransactionError(ChainError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


def parse_time(text: str) -> datetime:
    """Parse the wire timestamp format into an aware UTC datetime."""
    return datetime.strptime(text, TIME_FORMAT).replace(tzinfo=timezone.utc)


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIME_FORMAT)


@dataclass(frozen=True)
class TxInput:
    address: str
    value: int  # satoshi, > 0


@dataclass(frozen=True)
class TxOutput:
    address: str
    value: int  # satoshi, >= 0


@dataclass(frozen=True)
class Transaction:
    hash: str
    time: datetime
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    block_height: int
    block_pos: int

    @property
    def is_coinbase(self) -> bool:
        return not self.inputs

    @property
    def input_value(self) -> int:
        return sum(i.value for i in self.inputs)

    @property
    def output_value(self) -> int:
        return sum(o.value for o in self.outputs)

    @property
    def fee(self) -> int | None:
        """Input minus output value; None for coinbase transactions."""
        if self.is_coinbase:
            return None
        return self.input_value - self.output_value


@dataclass(frozen=True)
class Block:
    height: int
    hash: str
    time: datetime
    transactions: tuple[Transaction, ...]


@dataclass(frozen=True)
class AddressEntry:
    """Transactions an address appears in, per side, in chain order."""

    inputs: tuple[Transaction, ...] = ()
    outputs: tuple[Transaction, ...] = ()


@dataclass(frozen=True, eq=False)
class ChainHandle:
    """Immutable, fully indexed view of an ingested chain.

    Identity-based equality/hashing on purpose: handles are large and
    are cached by identity (e.g. memoized clusterings).
    """

    blocks: tuple[Block, ...]
    tx_index: dict[str, Transaction] = field(repr=False)
    addr_index: dict[str, AddressEntry] = field(repr=False)
    addresses: tuple[str, ...] = field(repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_transactions(self) -> int:
        return len(self.tx_index)

    @property
    def n_addresses(self) -> int:
        return len(self.addr_index)

    def iter_transactions(self):
        for block in self.blocks:
            yield from block.transactions


def _require(cond: bool, message: str, line: int):
    if not cond:
        raise ChainFormatError(message, line=line)


def _parse_tx(record, line: int, height: int, pos: int,
              block_time: datetime, profile: CurrencyProfile) -> Transaction:
    _require(isinstance(record, dict), "transaction record must be an object", line)
    h = record.get("hash")
    _require(isinstance(h, str) and h != "", "transaction hash missing", line)
    try:
        int(h, 16)
    except ValueError:
        raise ChainFormatError(f"transaction hash is not hex: {h!r}", line=line)
    h = h.lower()

    def side(key, ctor, min_value):
        entries = record.get(key, [])
        _require(isinstance(entries, list), f"{key} must be a list", line)
        parsed = []
        for e in entries:
            _require(isinstance(e, dict), f"{key} entry must be an object", line)
            addr, value = e.get("address"), e.get("value")
            _require(isinstance(addr, str), f"{key} entry missing address", line)
            _require(profile.is_valid(addr),
                     f"invalid {profile.name} address: {addr!r}", line)
            _require(isinstance(value, int) and not isinstance(value, bool),
                     f"{key} value must be an integer", line)
            _require(value >= min_value,
                     f"{key} value {value} below minimum {min_value}", line)
            parsed.append(ctor(address=addr, value=value))
        return tuple(parsed)

    inputs = side("inputs", TxInput, 1)
    outputs = side("outputs", TxOutput, 0)
    _require(len(outputs) > 0, f"transaction {h} has no outputs", line)
    if inputs:
        in_sum = sum(i.value for i in inputs)
        out_sum = sum(o.value for o in outputs)
        _require(in_sum >= out_sum,
                 f"transaction {h} outputs {out_sum} exceed inputs {in_sum}", line)
    return Transaction(hash=h, time=block_time, inputs=inputs, outputs=outputs,
                       block_height=height, block_pos=pos)


def _parse_block(record, line: int, profile: CurrencyProfile) -> Block:
    _require(isinstance(record, dict), "block record must be an object", line)
    height = record.get("height")
    _require(isinstance(height, int) and not isinstance(height, bool) and height >= 0,
             "block height must be a non-negative integer", line)
    h = record.get("hash")
    _require(isinstance(h, str) and h != "", "block hash missing", line)
    time_text = record.get("time")
    _require(isinstance(time_text, str), "block time missing", line)
    try:
        block_time = parse_time(time_text)
    except ValueError:
        raise ChainFormatError(f"bad block time {time_text!r} "
                               f"(expected {TIME_FORMAT})", line=line)
    txes = record.get("txes", [])
    _require(isinstance(txes, list), "txes must be a list", line)
    transactions = tuple(
        _parse_tx(t, line, height, pos, block_time, profile)
        for pos, t in enumerate(txes)
    )
    return Block(height=height, hash=h.lower(), time=block_time,
                 transactions=transactions)


def chain_from_records(records, profile: CurrencyProfile = BITCOIN) -> ChainHandle:
    """Build a handle from (line_number, block_dict) pairs.

    Exposed separately from file ingestion so tests and generators can
    construct chains without touching the filesystem.
    """
    blocks: list[Block] = []
    tx_index: dict[str, Transaction] = {}
    inputs_of: dict[str, list[Transaction]] = {}
    outputs_of: dict[str, list[Transaction]] = {}
    order: list[str] = []

    def note(addr: str):
        if addr not in inputs_of:
            inputs_of[addr] = []
            outputs_of[addr] = []
            order.append(addr)

    prev_time = None
    for line, record in records:
        block = _parse_block(record, line, profile)
        _require(block.height == len(blocks),
                 f"non-contiguous height {block.height} "
                 f"(expected {len(blocks)})", line)
        if prev_time is not None and block.time < prev_time:
            logger.warning("block %d time %s precedes its predecessor",
                           block.height, format_time(block.time))
        prev_time = block.time
        for tx in block.transactions:
            _require(tx.hash not in tx_index,
                     f"duplicate transaction hash {tx.hash}", line)
            tx_index[tx.hash] = tx
            for i in tx.inputs:
                note(i.address)
                if not inputs_of[i.address] or inputs_of[i.address][-1] is not tx:
                    inputs_of[i.address].append(tx)
            for o in tx.outputs:
                note(o.address)
                if not outputs_of[o.address] or outputs_of[o.address][-1] is not tx:
                    outputs_of[o.address].append(tx)
        blocks.append(block)

    addr_index = {
        a: AddressEntry(inputs=tuple(inputs_of[a]), outputs=tuple(outputs_of[a]))
        for a in order
    }
    return ChainHandle(blocks=tuple(blocks), tx_index=tx_index,
                       addr_index=addr_index, addresses=tuple(order))


def ingest_chain(path, profile: CurrencyProfile = BITCOIN) -> ChainHandle:
    """Parse a chain file into an immutable, indexed handle.

    Raises ChainFormatError (with the offending line number) on
    malformed records, duplicate hashes, non-contiguous heights, or
    value-conservation violations. Blank lines are skipped.
    """
    path = Path(path)

    def records():
        with path.open("r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    record = json.loads(raw)
                except json.JSONDecodeError as e:
                    raise ChainFormatError(f"malformed JSON: {e.msg}",
                                           line=line_no) from None
                yield line_no, record

    return chain_from_records(records(), profile=profile)


def get_transaction(chain: ChainHandle, tx_hash: str) -> Transaction:
    """Look up a transaction by hash, case-insensitively."""
    tx = chain.tx_index.get(tx_hash.lower())
    if tx is None:
        raise UnknownTransactionError(f"unknown transaction {tx_hash!r}")
    return tx


def transactions_of(chain: ChainHandle, address: str,
                    side: str = "both") -> list[Transaction]:
    """Transactions an address appears in, ordered by (height, position).

    `side` is "inputs", "outputs", or "both"; an unknown address yields
    an empty list. With side="both" a transaction touching the address
    on both sides appears once.
    """
    if side not in ("inputs", "outputs", "both"):
        raise ValueError(f"side must be inputs|outputs|both, got {side!r}")
    entry = chain.addr_index.get(address)
    if entry is None:
        return []
    if side == "inputs":
        return list(entry.inputs)
    if side == "outputs":
        return list(entry.outputs)
    merged = {tx.hash: tx for tx in entry.inputs}
    for tx in entry.outputs:
        merged.setdefault(tx.hash, tx)
    return sorted(merged.values(), key=lambda t: (t.block_height, t.block_pos))
