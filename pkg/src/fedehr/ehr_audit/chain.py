"""Append-only, SHA-256 hash-chained audit log.

Entry hash input (all integers big-endian)::

    for each of index, timestamp, actor_id, action, detail, prev_hash:
        u32 length || field bytes

``index`` and ``timestamp`` are encoded as decimal ASCII, text fields as
UTF-8 and ``prev_hash`` as its 32 raw bytes. The genesis entry's
``prev_hash`` is 32 zero bytes. On disk the chain is JSON lines with
lowercase-hex hashes, written with fixed key order and no whitespace.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Sequence

from ..errors import MalformedEntry

ZERO_HASH = bytes(32)
FIELD_ORDER = ("index", "timestamp", "actor_id", "action", "detail", "prev_hash", "entry_hash")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_DECODER = json.JSONDecoder(object_pairs_hook=list)


class Action(str, Enum):
    ACCESS_GRANTED = "access_granted"
    ACCESS_DENIED = "access_denied"
    POLICY_CHANGED = "policy_changed"
    DATA_EXPORTED = "data_exported"


def canonical_bytes(index: int, timestamp: int, actor_id: str, action: str, detail: str, prev_hash: bytes) -> bytes:
    parts = [
        str(index).encode("ascii"),
        str(timestamp).encode("ascii"),
        actor_id.encode("utf-8"),
        action.encode("utf-8"),
        detail.encode("utf-8"),
        prev_hash,
    ]
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def compute_hash(index, timestamp, actor_id, action, detail, prev_hash) -> bytes:
    return hashlib.sha256(canonical_bytes(index, timestamp, actor_id, action, detail, prev_hash)).digest()


@dataclass(frozen=True)
class LogEntry:
    index: int
    timestamp: int
    actor_id: str
    action: Action
    detail: str
    prev_hash: bytes
    entry_hash: bytes

    def expected_hash(self) -> bytes:
        return compute_hash(
            self.index, self.timestamp, self.actor_id, self.action.value, self.detail, self.prev_hash
        )

    def to_json(self) -> str:
        d = {
            "index": self.index,
            "timestamp": self.timestamp,
            "actor_id": self.actor_id,
            "action": self.action.value,
            "detail": self.detail,
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
        }
        return json.dumps(d, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_json(cls, line: str) -> LogEntry:
        """Strict parse: exact key set and order, exact types, lowercase hex."""
        try:
            pairs = _DECODER.decode(line)
        except json.JSONDecodeError as exc:
            raise MalformedEntry(f"invalid JSON: {exc.msg}") from None
        if not isinstance(pairs, list) or tuple(k for k, _ in pairs) != FIELD_ORDER:
            raise MalformedEntry("unexpected keys")
        d = dict(pairs)
        for name in ("index", "timestamp"):
            if type(d[name]) is not int:
                raise MalformedEntry(f"{name} must be an integer")
        for name in ("actor_id", "action", "detail", "prev_hash", "entry_hash"):
            if type(d[name]) is not str:
                raise MalformedEntry(f"{name} must be a string")
        for name in ("prev_hash", "entry_hash"):
            if not _HEX64.match(d[name]):
                raise MalformedEntry(f"{name} is not 64 lowercase hex digits")
        try:
            action = Action(d["action"])
        except ValueError:
            raise MalformedEntry(f"unknown action {d['action']!r}") from None
        return cls(
            d["index"], d["timestamp"], d["actor_id"], action, d["detail"],
            bytes.fromhex(d["prev_hash"]), bytes.fromhex(d["entry_hash"]),
        )


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"violation at index {self.index}: {self.reason}"


class LogChain:
    """Single-writer append-only log. Entries are immutable once appended."""

    def __init__(self, entries: Iterable[LogEntry] = ()):
        self._entries: list[LogEntry] = list(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self._entries)

    def __getitem__(self, i: int) -> LogEntry:
        return self._entries[i]

    @property
    def entries(self) -> tuple[LogEntry, ...]:
        return tuple(self._entries)

    @property
    def tip_hash(self) -> bytes:
        return self._entries[-1].entry_hash if self._entries else ZERO_HASH

    def append(self, timestamp: int, actor_id: str, action: Action | str, detail: str = "") -> LogEntry:
        action = Action(action)
        index = len(self._entries)
        prev = self.tip_hash
        entry = LogEntry(
            index, int(timestamp), actor_id, action, detail, prev,
            compute_hash(index, int(timestamp), actor_id, action.value, detail, prev),
        )
        self._entries.append(entry)
        return entry

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self._entries)

    @classmethod
    def from_jsonl(cls, data: bytes | str) -> LogChain:
        """Load without verifying; raises :class:`MalformedEntry` on bad lines."""
        entries, violation = _parse_lines(data)
        if violation is not None:
            raise MalformedEntry(str(violation))
        return cls(entries)


def verify_chain(entries: Sequence[LogEntry] | LogChain) -> Violation | None:
    """First integrity violation in the chain, or None when it verifies."""
    prev = ZERO_HASH
    for pos, e in enumerate(entries):
        if e.index != pos:
            return Violation(pos, "index-gap")
        if e.prev_hash != prev:
            return Violation(pos, "broken-link")
        if e.expected_hash() != e.entry_hash:
            return Violation(pos, "hash-mismatch")
        prev = e.entry_hash
    return None


def _iter_lines(raw: bytes) -> Iterator[tuple[int, LogEntry | Violation]]:
    if not raw:
        return
    lines = raw.split(b"\n")
    if lines[-1] != b"":
        yield len(lines) - 1, Violation(len(lines) - 1, "malformed: missing final newline")
        return
    for pos, line in enumerate(lines[:-1]):
        try:
            yield pos, LogEntry.from_json(line.decode("utf-8"))
        except UnicodeDecodeError:
            yield pos, Violation(pos, "malformed: invalid UTF-8")
            return
        except MalformedEntry as exc:
            yield pos, Violation(pos, f"malformed: {exc}")
            return


def _parse_lines(data: bytes | str) -> tuple[list[LogEntry], Violation | None]:
    raw = data.encode("utf-8") if isinstance(data, str) else data
    entries = []
    for _, item in _iter_lines(raw):
        if isinstance(item, Violation):
            return entries, item
        entries.append(item)
    return entries, None


def verify_jsonl(data: bytes | str) -> tuple[int, Violation | None]:
    """Verify a serialized chain line by line, stopping at the first problem.

    Returns the number of entries read and the first violation (or None).
    """
    raw = data.encode("utf-8") if isinstance(data, str) else data
    count, prev = 0, ZERO_HASH
    for pos, item in _iter_lines(raw):
        if isinstance(item, Violation):
            return count, item
        count += 1
        if item.index != pos:
            return count, Violation(pos, "index-gap")
        if item.prev_hash != prev:
            return count, Violation(pos, "broken-link")
        if item.expected_hash() != item.entry_hash:
            return count, Violation(pos, "hash-mismatch")
        prev = item.entry_hash
    return count, None
