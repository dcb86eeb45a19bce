"""Durable append-only context log with checkpointing and selective retention.

On-disk format, little-endian, one record after another:

    u32 length | u32 CRC32 of payload | payload bytes

where the payload is the canonical JSON serialization of a LogEntry. Appends
flush (and fsync) before returning, so an acknowledged entry survives process
death. A torn or corrupt tail is truncated at open with a warning; committed
entries are never rewritten.
"""
from __future__ import annotations

import io
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .errors import BudgetTooSmall, StorageFailure, UnknownCheckpoint
from .state import OpStatus, StateSnapshot, canonical_json

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<II")


class LogKind:
    """Entry kinds. The domain kinds are op-record, checkpoint, disruption,
    validation-verdict, and compensation; phase, restore-marker, and control
    entries carry engine bookkeeping (sub-phase boundaries, restore points,
    run lifecycle)."""

    OP_RECORD = "op-record"
    CHECKPOINT = "checkpoint"
    DISRUPTION = "disruption"
    VERDICT = "validation-verdict"
    COMPENSATION = "compensation"
    PHASE = "phase"
    RESTORE = "restore-marker"
    CONTROL = "control"

    ALL = (OP_RECORD, CHECKPOINT, DISRUPTION, VERDICT, COMPENSATION, PHASE, RESTORE, CONTROL)


@dataclass(frozen=True)
class LogEntry:
    seq: int
    kind: str
    payload: Mapping[str, Any]
    committed: bool = True
    category: str | None = None

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": dict(self.payload),
            "committed": self.committed,
            "category": self.category,
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_dict()).encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "LogEntry":
        data = json.loads(raw.decode("utf-8"))
        return cls(
            seq=int(data["seq"]),
            kind=data["kind"],
            payload=dict(data.get("payload", {})),
            committed=bool(data.get("committed", True)),
            category=data.get("category"),
        )


# Retention classes ranked by priority; anything else ranks after these.
RETENTION_PRIORITY = ("constraint", "dependency", "goal", "operation", "reasoning")


@dataclass(frozen=True)
class RetentionPolicy:
    """Bounded-context selection: at most max_records entries and (optionally)
    max_bytes of encoded payload, never dropping unresolved constraints or
    uncompensated operation records."""

    max_records: int
    max_bytes: int | None = None
    priorities: tuple[str, ...] = RETENTION_PRIORITY


def retention_class(entry: LogEntry) -> str:
    if entry.category:
        return entry.category
    if entry.kind == LogKind.OP_RECORD:
        return "operation"
    if entry.kind == LogKind.VERDICT:
        return "validation"
    return "other"


class ContextStore:
    """Single-writer, multi-reader durable log.

    Exactly one thread of control may append or checkpoint; readers may query
    committed entries concurrently. Restore never truncates: it appends a
    restore-marker and hands back the checkpointed snapshot.
    """

    def __init__(self, path: str | Path, *, flush_each_append: bool = True):
        self.path = Path(path)
        self.flush_each_append = flush_each_append
        self._entries: list[LogEntry] = []
        self._checkpoints: dict[str, int] = {}  # checkpoint-id -> index in _entries
        self._truncated_bytes = 0
        self._fh: io.BufferedRandom | None = None
        self._open()

    # -- lifecycle ----------------------------------------------------------

    def _open(self) -> None:
        existing = self.path.exists()
        mode = "r+b" if existing else "w+b"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode)
        if existing:
            self._scan()

    def _scan(self) -> None:
        assert self._fh is not None
        self._fh.seek(0)
        good_offset = 0
        while True:
            header = self._fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                break
            length, crc = _HEADER.unpack(header)
            payload = self._fh.read(length)
            if len(payload) < length or zlib.crc32(payload) != crc:
                break
            try:
                entry = LogEntry.decode(payload)
            except (ValueError, KeyError):
                break
            self._index(entry)
            good_offset += _HEADER.size + length
        end = self.path.stat().st_size
        if end > good_offset:
            self._truncated_bytes = end - good_offset
            logger.warning(
                "truncating %d corrupt trailing bytes in %s", self._truncated_bytes, self.path
            )
            self._fh.truncate(good_offset)
            self._fh.flush()
        self._fh.seek(0, os.SEEK_END)

    def _index(self, entry: LogEntry) -> None:
        self._entries.append(entry)
        if entry.kind == LogKind.CHECKPOINT:
            self._checkpoints[entry.payload["checkpoint_id"]] = len(self._entries) - 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "ContextStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ---------------------------------------------------------------

    @property
    def last_seq(self) -> int:
        return self._entries[-1].seq if self._entries else 0

    def append(
        self,
        kind: str,
        payload: Mapping[str, Any],
        *,
        category: str | None = None,
        committed: bool = True,
    ) -> int:
        """Durably append one entry; returns its assigned sequence number."""
        entry = LogEntry(
            seq=self.last_seq + 1,
            kind=kind,
            payload=dict(payload),
            committed=committed,
            category=category,
        )
        raw = entry.encode()
        frame = _HEADER.pack(len(raw), zlib.crc32(raw)) + raw
        try:
            assert self._fh is not None, "store is closed"
            self._fh.write(frame)
            if self.flush_each_append:
                self._fh.flush()
                os.fsync(self._fh.fileno())
        except (OSError, AssertionError) as exc:
            raise StorageFailure(str(exc)) from exc
        self._index(entry)
        return entry.seq

    def checkpoint(self, snap: StateSnapshot) -> str:
        """Persist a snapshot; the returned id can be handed to restore()."""
        if snap.log_cursor > self.last_seq:
            raise StorageFailure(
                f"snapshot cursor {snap.log_cursor} is ahead of the log ({self.last_seq})"
            )
        checkpoint_id = f"ck-{self.last_seq + 1}"
        self.append(
            LogKind.CHECKPOINT,
            {"checkpoint_id": checkpoint_id, "snapshot": snap.to_dict()},
        )
        return checkpoint_id

    def restore(self, checkpoint_id: str) -> StateSnapshot:
        """Return the checkpointed snapshot. The log keeps every committed
        entry; a restore-marker records the rollback point."""
        index = self._checkpoints.get(checkpoint_id)
        if index is None:
            raise UnknownCheckpoint(checkpoint_id)
        snapshot = StateSnapshot.from_dict(self._entries[index].payload["snapshot"])
        self.append(LogKind.RESTORE, {"checkpoint_id": checkpoint_id})
        return snapshot

    # -- reads ----------------------------------------------------------------

    def entries(self, *, after_seq: int = 0) -> list[LogEntry]:
        return [e for e in self._entries if e.seq > after_seq]

    def checkpoints(self) -> list[str]:
        return sorted(self._checkpoints, key=lambda cid: self._checkpoints[cid])

    def recover(self) -> dict:
        """Summarize the durable prefix found at open."""
        return {
            "entries": len(self._entries),
            "last_seq": self.last_seq,
            "truncated_bytes": self._truncated_bytes,
            "checkpoints": self.checkpoints(),
        }

    def query_history(
        self,
        *,
        kind: str | None = None,
        op: str | None = None,
        seq_range: tuple[int, int] | None = None,
        tick_range: tuple[int, int] | None = None,
    ) -> list[LogEntry]:
        """All and only committed entries matching the filter, in sequence order."""
        out = []
        for e in self._entries:
            if not e.committed:
                continue
            if kind is not None and e.kind != kind:
                continue
            if op is not None and e.payload.get("op") != op:
                continue
            if seq_range is not None and not (seq_range[0] <= e.seq <= seq_range[1]):
                continue
            if tick_range is not None:
                tick = e.payload.get("tick")
                if tick is None or not (tick_range[0] <= tick <= tick_range[1]):
                    continue
            out.append(e)
        return out

    def prefix_hash(self, upto_seq: int | None = None) -> str:
        """Hash of the raw encoded entries up to a sequence number; used to
        prove committed history is byte-stable."""
        import hashlib

        h = hashlib.sha256()
        for e in self._entries:
            if upto_seq is not None and e.seq > upto_seq:
                break
            h.update(e.encode())
            h.update(b"\n")
        return h.hexdigest()

    # -- retention --------------------------------------------------------------

    def unresolved_constraints(self) -> set[str]:
        declared: set[str] = set()
        resolved: set[str] = set()
        for e in self._entries:
            if retention_class(e) == "constraint":
                declared.add(e.payload.get("constraint_id", f"seq-{e.seq}"))
            elif e.category == "constraint-resolved":
                resolved.add(e.payload.get("constraint_id", ""))
        return declared - resolved

    def uncompensated_ops(self) -> set[str]:
        completed: set[str] = set()
        compensated: set[str] = set()
        for e in self._entries:
            if e.kind == LogKind.OP_RECORD and e.payload.get("status") == OpStatus.COMPLETED.value:
                completed.add(e.payload.get("op", ""))
            elif e.kind == LogKind.COMPENSATION:
                compensated.add(e.payload.get("op", ""))
        return completed - compensated

    def retained_context(self, policy: RetentionPolicy) -> list[LogEntry]:
        """Select the bounded working context: every unresolved constraint and
        uncompensated op-record, then best-effort fill by priority class and
        recency. Raises BudgetTooSmall when the mandatory set alone does not
        fit."""
        unresolved = self.unresolved_constraints()
        uncompensated = self.uncompensated_ops()

        def mandatory(e: LogEntry) -> bool:
            cls = retention_class(e)
            if cls == "constraint":
                return e.payload.get("constraint_id", f"seq-{e.seq}") in unresolved
            if e.kind == LogKind.OP_RECORD:
                return (
                    e.payload.get("status") == OpStatus.COMPLETED.value
                    and e.payload.get("op") in uncompensated
                )
            return False

        def rank(e: LogEntry) -> int:
            cls = retention_class(e)
            return policy.priorities.index(cls) if cls in policy.priorities else len(policy.priorities)

        ordered = sorted(self._entries, key=lambda e: (rank(e), -e.seq))
        sizes = {e.seq: len(e.encode()) for e in self._entries}

        picked: list[LogEntry] = [e for e in ordered if mandatory(e)]
        used_bytes = sum(sizes[e.seq] for e in picked)
        if len(picked) > policy.max_records or (
            policy.max_bytes is not None and used_bytes > policy.max_bytes
        ):
            raise BudgetTooSmall(
                f"mandatory context ({len(picked)} records, {used_bytes} bytes) exceeds "
                f"budget ({policy.max_records} records, {policy.max_bytes} bytes)"
            )
        chosen = {e.seq for e in picked}
        for e in ordered:
            if e.seq in chosen:
                continue
            if len(picked) + 1 > policy.max_records:
                continue
            if policy.max_bytes is not None and used_bytes + sizes[e.seq] > policy.max_bytes:
                continue
            picked.append(e)
            chosen.add(e.seq)
            used_bytes += sizes[e.seq]
        return sorted(picked, key=lambda e: (rank(e), -e.seq))


def dump_entries(path: str | Path, out: Callable[[str], None] = print) -> int:
    """Render a log file as line-delimited JSON; returns the entry count."""
    store = ContextStore(path)
    try:
        count = 0
        for entry in store.entries():
            out(canonical_json(entry.to_dict()))
            count += 1
        return count
    finally:
        store.close()
