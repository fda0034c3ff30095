"""Durable storage: per-user mailboxes, attachment blobs, outbound queue.

Backed by a single embedded sqlite database per data directory. All
operations go through one connection guarded by a lock, which also
gives the per-mailbox serialization the callers rely on.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import envelope as env_mod
from .clockutil import now_ms
from .envelope import Address, Envelope
from .errors import HashMismatch, NotFound, PermissionDenied, StoreFailed

DEFAULT_HASH_ALG = "sha256"
MAX_ATTEMPTS = 5
RETRY_BASE_MS = 1_000
RETRY_CAP_MS = 60_000

_SCHEMA = """
CREATE TABLE IF NOT EXISTS messages (
    owner       TEXT NOT NULL,
    message_id  TEXT NOT NULL,
    envelope    BLOB NOT NULL,
    received_at INTEGER NOT NULL,
    read        INTEGER NOT NULL DEFAULT 0,
    sent_copy   INTEGER NOT NULL DEFAULT 0,
    seq         INTEGER PRIMARY KEY AUTOINCREMENT,
    UNIQUE(owner, message_id)
);
CREATE TABLE IF NOT EXISTS attachments (
    guid        TEXT PRIMARY KEY,
    blob        BLOB NOT NULL,
    hash_alg    TEXT NOT NULL,
    digest      TEXT NOT NULL,
    size        INTEGER NOT NULL,
    description TEXT NOT NULL,
    acl         TEXT NOT NULL,
    stored_at   INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS queue (
    id          INTEGER PRIMARY KEY AUTOINCREMENT,
    envelope    BLOB NOT NULL,
    next_hop    TEXT NOT NULL,
    attempts    INTEGER NOT NULL DEFAULT 0,
    not_before  INTEGER NOT NULL,
    dead        INTEGER NOT NULL DEFAULT 0
);
"""


def content_digest(blob: bytes, algorithm: str = DEFAULT_HASH_ALG) -> str:
    try:
        return hashlib.new(algorithm, blob).hexdigest()
    except ValueError as exc:
        raise StoreFailed(f"unknown hash algorithm: {algorithm}") from exc


@dataclass(frozen=True)
class AttachmentRecord:
    guid: str
    blob: bytes
    hash_algorithm: str
    digest: str
    size: int
    description: str
    acl: frozenset[str]  # rendered addresses
    stored_at: int


@dataclass(frozen=True)
class QueueEntry:
    id: int
    envelope: Envelope
    next_hop: str
    attempts: int
    not_before: int
    dead: bool


def header_projection(env: Envelope, received_at: int, read: bool) -> dict:
    """Inbox listing entry: never includes body bytes."""
    return {
        "message_id": env.message_id,
        "from": str(env.sender),
        "subject": env.subject,
        "sent_at": env.sent_at,
        "flags": sorted(env.flags),
        "received_at": received_at,
        "read": bool(read),
        "attachment_count": len(env.attachments),
    }


class MessageStore:
    def __init__(self, data_dir: str | Path):
        self._lock = threading.RLock()
        if str(data_dir) == ":memory:":  # ephemeral store for simulation runs
            self._db = sqlite3.connect(
                ":memory:", check_same_thread=False, isolation_level=None
            )
        else:
            self._dir = Path(data_dir)
            self._dir.mkdir(parents=True, exist_ok=True)
            self._db = sqlite3.connect(
                self._dir / "store.db", check_same_thread=False, isolation_level=None
            )
            self._db.execute("PRAGMA journal_mode=WAL")
            self._db.execute("PRAGMA synchronous=NORMAL")
        self._db.executescript(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._db.close()

    # ------------------------------------------------------------ mailbox

    def put_message(
        self,
        owner: Address,
        env: Envelope,
        received_at: int | None = None,
        sent_copy: bool = False,
    ) -> bool:
        """Store a message; returns False if (owner, id) already present.

        Idempotent by (mailbox, message_id), which is the relay-retry
        duplicate suppression key.
        """
        env.validate()
        if not sent_copy and owner not in env.to:
            raise StoreFailed(f"{owner} is not a recipient")
        at = received_at if received_at is not None else now_ms()
        with self._lock:
            cur = self._db.execute(
                "INSERT OR IGNORE INTO messages"
                " (owner, message_id, envelope, received_at, sent_copy)"
                " VALUES (?, ?, ?, ?, ?)",
                (str(owner), env.message_id, env_mod.render(env), at, int(sent_copy)),
            )
            return cur.rowcount == 1

    def list_headers(self, owner: Address, include_sent: bool = False) -> list[dict]:
        with self._lock:
            rows = self._db.execute(
                "SELECT envelope, received_at, read FROM messages"
                " WHERE owner = ? AND (sent_copy = 0 OR ?)"
                " ORDER BY received_at, seq",
                (str(owner), int(include_sent)),
            ).fetchall()
        return [
            header_projection(env_mod.parse(blob), received_at, read)
            for blob, received_at, read in rows
        ]

    def get_message(self, owner: Address, message_id: str) -> Envelope:
        with self._lock:
            row = self._db.execute(
                "SELECT envelope FROM messages WHERE owner = ? AND message_id = ?",
                (str(owner), message_id),
            ).fetchone()
            if row is None:
                raise NotFound(f"no message {message_id}")
            self._db.execute(
                "UPDATE messages SET read = 1 WHERE owner = ? AND message_id = ?",
                (str(owner), message_id),
            )
        return env_mod.parse(row[0])

    def delete_message(self, owner: Address, message_id: str) -> None:
        with self._lock:
            cur = self._db.execute(
                "DELETE FROM messages WHERE owner = ? AND message_id = ?",
                (str(owner), message_id),
            )
        if cur.rowcount == 0:
            raise NotFound(f"no message {message_id}")

    def message_count(self, owner: Address | None = None) -> int:
        with self._lock:
            if owner is None:
                row = self._db.execute(
                    "SELECT COUNT(*) FROM messages WHERE sent_copy = 0"
                ).fetchone()
            else:
                row = self._db.execute(
                    "SELECT COUNT(*) FROM messages WHERE owner = ? AND sent_copy = 0",
                    (str(owner),),
                ).fetchone()
        return row[0]

    # -------------------------------------------------------- attachments

    def put_attachment(
        self,
        blob: bytes,
        description: str,
        acl: set[str] | frozenset[str],
        guid: str | None = None,
        hash_algorithm: str = DEFAULT_HASH_ALG,
        declared_digest: str | None = None,
        stored_at: int | None = None,
    ) -> AttachmentRecord:
        """Store a blob; recomputes the digest and, when the client
        declared one, rejects on mismatch before writing."""
        if not acl:
            raise StoreFailed("attachment ACL must be non-empty")
        digest = content_digest(blob, hash_algorithm)
        if declared_digest is not None and declared_digest != digest:
            raise HashMismatch("declared digest does not match content")
        record = AttachmentRecord(
            guid=guid or env_mod.new_id(),
            blob=blob,
            hash_algorithm=hash_algorithm,
            digest=digest,
            size=len(blob),
            description=description,
            acl=frozenset(acl),
            stored_at=stored_at if stored_at is not None else now_ms(),
        )
        with self._lock:
            self._db.execute(
                "INSERT INTO attachments"
                " (guid, blob, hash_alg, digest, size, description, acl, stored_at)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    record.guid,
                    record.blob,
                    record.hash_algorithm,
                    record.digest,
                    record.size,
                    record.description,
                    json.dumps(sorted(record.acl)),
                    record.stored_at,
                ),
            )
        return record

    def get_attachment(self, guid: str, requester: Address | str) -> AttachmentRecord:
        with self._lock:
            row = self._db.execute(
                "SELECT blob, hash_alg, digest, size, description, acl, stored_at"
                " FROM attachments WHERE guid = ?",
                (guid,),
            ).fetchone()
        if row is None:
            raise NotFound(f"no attachment {guid}")
        blob, hash_alg, digest, size, description, acl_json, stored_at = row
        acl = frozenset(json.loads(acl_json))
        if str(requester) not in acl:
            raise PermissionDenied(f"{requester} not in ACL")
        if content_digest(blob, hash_alg) != digest:
            raise HashMismatch("stored blob corrupted")
        return AttachmentRecord(guid, blob, hash_alg, digest, size, description, acl, stored_at)

    def attachment_acl(self, guid: str) -> frozenset[str]:
        with self._lock:
            row = self._db.execute(
                "SELECT acl FROM attachments WHERE guid = ?", (guid,)
            ).fetchone()
        if row is None:
            raise NotFound(f"no attachment {guid}")
        return frozenset(json.loads(row[0]))

    def corrupt_attachment_for_test(self, guid: str) -> None:
        """Flips one byte of a stored blob. Test hook for HASH_MISMATCH."""
        with self._lock:
            row = self._db.execute(
                "SELECT blob FROM attachments WHERE guid = ?", (guid,)
            ).fetchone()
            if row is None:
                raise NotFound(guid)
            blob = bytearray(row[0] or b"\0")
            blob[0] ^= 0xFF
            self._db.execute(
                "UPDATE attachments SET blob = ? WHERE guid = ?", (bytes(blob), guid)
            )

    # -------------------------------------------------------------- queue

    def enqueue(self, env: Envelope, next_hop: str, not_before: int | None = None) -> int:
        with self._lock:
            cur = self._db.execute(
                "INSERT INTO queue (envelope, next_hop, not_before) VALUES (?, ?, ?)",
                (env_mod.render(env), next_hop, not_before if not_before is not None else 0),
            )
            return cur.lastrowid

    def due_entries(self, now: int, limit: int = 32) -> list[QueueEntry]:
        with self._lock:
            rows = self._db.execute(
                "SELECT id, envelope, next_hop, attempts, not_before, dead FROM queue"
                " WHERE dead = 0 AND not_before <= ? ORDER BY id LIMIT ?",
                (now, limit),
            ).fetchall()
        return [
            QueueEntry(i, env_mod.parse(blob), hop, attempts, nb, bool(dead))
            for i, blob, hop, attempts, nb, dead in rows
        ]

    def mark_delivered(self, entry_id: int) -> None:
        with self._lock:
            self._db.execute("DELETE FROM queue WHERE id = ?", (entry_id,))

    def mark_failed(self, entry_id: int, now: int, max_attempts: int = MAX_ATTEMPTS) -> bool:
        """Record a failed attempt. Returns True if the entry dead-letters.

        Backoff doubles from 1 s, capped at 60 s.
        """
        with self._lock:
            row = self._db.execute(
                "SELECT attempts FROM queue WHERE id = ?", (entry_id,)
            ).fetchone()
            if row is None:
                raise NotFound(f"queue entry {entry_id}")
            attempts = row[0] + 1
            if attempts >= max_attempts:
                self._db.execute(
                    "UPDATE queue SET attempts = ?, dead = 1 WHERE id = ?",
                    (attempts, entry_id),
                )
                return True
            delay = min(RETRY_BASE_MS * 2 ** (attempts - 1), RETRY_CAP_MS)
            self._db.execute(
                "UPDATE queue SET attempts = ?, not_before = ? WHERE id = ?",
                (attempts, now + delay, entry_id),
            )
            return False

    def dead_letters(self) -> list[QueueEntry]:
        with self._lock:
            rows = self._db.execute(
                "SELECT id, envelope, next_hop, attempts, not_before, dead FROM queue"
                " WHERE dead = 1 ORDER BY id"
            ).fetchall()
        return [
            QueueEntry(i, env_mod.parse(blob), hop, attempts, nb, bool(dead))
            for i, blob, hop, attempts, nb, dead in rows
        ]

    def queue_size(self, include_dead: bool = False) -> int:
        with self._lock:
            row = self._db.execute(
                "SELECT COUNT(*) FROM queue WHERE dead = 0 OR ?", (int(include_dead),)
            ).fetchone()
        return row[0]
