"""Typed annotation store for blocks, transactions, and addresses.

Tags persist to an append-only JSON log, one record per line:

    {"op": "put"|"remove", "level": str, "id": str,
     "append": bool, "tags": [{"type": ..., "source": ..., "info": {...}}]}

The in-memory cache is rebuilt by replaying the log on open and is
write-through: every mutation is flushed to the log before it returns.
Closing the store compacts the log to one put per surviving key.

Retrieval is hierarchical: a transaction's tags include the tags of its
input and output addresses, and a block's tags include everything below
it, so annotating addresses alone is enough to annotate the whole chain.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .chain import ChainHandle

TAG_TYPES = frozenset({"user", "service", "text", "custom"})
TAG_LEVELS = ("block", "transaction", "address")

_BLOCK_ID = re.compile(r"^\d+$")
_TX_ID = re.compile(r"^[0-9a-fA-F]+$")
_ADDRESS_ID = re.compile(r"^\S+$")


class TagStoreError(Exception):
    pass


@dataclass(frozen=True)
class Tag:
    type: str
    source: str
    info: dict

    def __post_init__(self):
        if self.type not in TAG_TYPES:
            raise TagStoreError(
                f"invalid tag type {self.type!r}; expected one of "
                f"{sorted(TAG_TYPES)}")
        if not isinstance(self.source, str):
            raise TagStoreError("tag source must be a string")
        if not isinstance(self.info, dict):
            raise TagStoreError("tag info must be a JSON object")

    @classmethod
    def from_dict(cls, data: dict) -> "Tag":
        if not isinstance(data, dict):
            raise TagStoreError(f"tag must be an object, got {type(data).__name__}")
        extra = set(data) - {"type", "source", "info"}
        if extra:
            raise TagStoreError(f"unknown tag keys: {sorted(extra)}")
        missing = {"type", "source", "info"} - set(data)
        if missing:
            raise TagStoreError(f"tag missing keys: {sorted(missing)}")
        return cls(type=data["type"], source=data["source"], info=data["info"])

    def to_dict(self) -> dict:
        return {"type": self.type, "source": self.source, "info": self.info}

    @property
    def id(self) -> str:
        """Stable identifier: `<type>:<source>:<primary>`.

        The primary field is info.id when present, else the first of
        account/provider/label.
        """
        primary = ""
        for key in ("id", "account", "provider", "label"):
            if key in self.info:
                primary = str(self.info[key])
                break
        return f"{self.type}:{self.source}:{primary}"


@dataclass(frozen=True)
class TagKey:
    level: str
    identifier: str

    def __post_init__(self):
        if self.level not in TAG_LEVELS:
            raise TagStoreError(f"invalid tag level {self.level!r}")
        if not self.identifier:
            raise TagStoreError("tag identifier must be non-empty")
        if self.level == "block" and not _BLOCK_ID.match(self.identifier):
            raise TagStoreError(
                f"block identifier must be a height, got {self.identifier!r}")
        if self.level == "transaction":
            if not _TX_ID.match(self.identifier):
                raise TagStoreError(
                    f"transaction identifier must be hex, got {self.identifier!r}")
            object.__setattr__(self, "identifier", self.identifier.lower())
        if self.level == "address" and not _ADDRESS_ID.match(self.identifier):
            raise TagStoreError(
                f"address identifier must not contain whitespace")


class TagStore:
    """Persistent key-value tag store with a write-through cache.

    Single writer, many readers: mutations serialize on an internal
    lock; reads against the immutable snapshot lists are safe from any
    number of threads.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._cache: dict[TagKey, list[Tag]] = {}
        self._lock = threading.Lock()
        self._closed = False
        if self.path.exists():
            self._replay()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()
        self._fh = self.path.open("a", encoding="utf-8")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _replay(self):
        with self.path.open("r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    record = json.loads(raw)
                    op = record["op"]
                    key = TagKey(record["level"], record["id"])
                    if op == "put":
                        tags = [Tag.from_dict(t) for t in record["tags"]]
                        self._apply_put(key, tags, record.get("append", False))
                    elif op == "remove":
                        self._cache.pop(key, None)
                    else:
                        raise TagStoreError(f"unknown op {op!r}")
                except (KeyError, TypeError, json.JSONDecodeError) as e:
                    raise TagStoreError(
                        f"{self.path}: corrupt tag log at line {line_no}: {e}"
                    ) from None

    def _apply_put(self, key: TagKey, tags: list[Tag], append: bool):
        if append and key in self._cache:
            self._cache[key].extend(tags)
        else:
            self._cache[key] = list(tags)

    def _write(self, record: dict):
        if self._closed:
            raise TagStoreError("store is closed")
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._fh.flush()

    def put_tags(self, key: TagKey, value: list[Tag], append: bool = False) -> int:
        """Store tags at a key; returns the tag count now at the key.

        append=False replaces any existing list, append=True extends it.
        The record is persisted before the call returns.
        """
        if not value:
            raise TagStoreError("put_tags requires a non-empty tag list")
        for tag in value:
            if not isinstance(tag, Tag):
                raise TagStoreError("put_tags expects Tag values")
        with self._lock:
            self._write({"op": "put", "level": key.level, "id": key.identifier,
                         "append": append,
                         "tags": [t.to_dict() for t in value]})
            self._apply_put(key, value, append)
            return len(self._cache[key])

    def remove_tags(self, key: TagKey) -> int:
        """Remove every tag at a key; returns how many were removed."""
        with self._lock:
            removed = len(self._cache.get(key, ()))
            self._write({"op": "remove", "level": key.level,
                         "id": key.identifier, "append": False, "tags": []})
            self._cache.pop(key, None)
            return removed

    def tags_for(self, level: str, identifier: str) -> tuple[Tag, ...]:
        """Direct cache read of a single key's own tags."""
        try:
            key = TagKey(level, identifier)
        except TagStoreError:
            return ()
        return tuple(self._cache.get(key, ()))

    def get_tags(self, key: TagKey, include_lower: bool = True,
                 chain: ChainHandle | None = None) -> list[tuple[TagKey, Tag]]:
        """Tags at a key, optionally including lower-level identifiers.

        At transaction level the result adds the tags of the input and
        output addresses; at block level it adds the block's
        transactions and their addresses. Order is deterministic: own
        tags first, then lower levels by position, with each key
        reported once at its first position. `chain` is required when
        include_lower is set and the level is not "address".
        """
        out: list[tuple[TagKey, Tag]] = []
        seen: set[TagKey] = set()

        def emit(k: TagKey):
            if k in seen:
                return
            seen.add(k)
            for tag in self._cache.get(k, ()):
                out.append((k, tag))

        emit(key)
        if not include_lower or key.level == "address":
            return out
        if chain is None:
            raise TagStoreError(
                "get_tags with include_lower at block/transaction level "
                "requires a chain handle")

        def descend_tx(tx):
            for i in tx.inputs:
                emit(TagKey("address", i.address))
            for o in tx.outputs:
                emit(TagKey("address", o.address))

        if key.level == "transaction":
            tx = chain.tx_index.get(key.identifier)
            if tx is not None:
                descend_tx(tx)
        else:  # block
            height = int(key.identifier)
            if 0 <= height < len(chain.blocks):
                for tx in chain.blocks[height].transactions:
                    emit(TagKey("transaction", tx.hash))
                    descend_tx(tx)
        return out

    def scan_tags(self, type_filter: set[str] | None = None,
                  substring: str | None = None) -> list[tuple[TagKey, Tag]]:
        """Full scan over all entries, filtered by type and/or substring.

        The substring test is a case-insensitive plain substring match
        against any string leaf of the tag's info object, descending
        into nested objects and arrays.
        """
        if type_filter is not None:
            bad = set(type_filter) - TAG_TYPES
            if bad:
                raise TagStoreError(f"invalid tag types in filter: {sorted(bad)}")
        needle = substring.lower() if substring is not None else None
        out = []
        for key, tags in self._cache.items():
            for tag in tags:
                if type_filter is not None and tag.type not in type_filter:
                    continue
                if needle is not None and not _contains(tag.info, needle):
                    continue
                out.append((key, tag))
        return out

    def keys(self) -> list[TagKey]:
        return list(self._cache)

    def close(self):
        """Compact the log to one put per key and close the handle."""
        if self._closed:
            return
        with self._lock:
            self._fh.close()
            tmp = self.path.with_suffix(self.path.suffix + ".compact")
            with tmp.open("w", encoding="utf-8") as fh:
                for key, tags in self._cache.items():
                    fh.write(json.dumps(
                        {"op": "put", "level": key.level, "id": key.identifier,
                         "append": False,
                         "tags": [t.to_dict() for t in tags]},
                        ensure_ascii=False) + "\n")
            tmp.replace(self.path)
            self._closed = True


def _contains(value, needle: str) -> bool:
    if isinstance(value, str):
        return needle in value.lower()
    if isinstance(value, dict):
        return any(_contains(v, needle) for v in value.values())
    if isinstance(value, list):
        return any(_contains(v, needle) for v in value)
    return False
