import hashlib
import random

import pytest

from wsmail.envelope import Address
from wsmail.errors import HashMismatch, NotFound, PermissionDenied, StoreFailed
from wsmail.store import MessageStore, content_digest

from conftest import make_envelope


@pytest.fixture
def store(tmp_path):
    s = MessageStore(tmp_path / "data")
    yield s
    s.close()


ALICE = Address("alice", "alpha.test")
BOB = Address("bob", "beta.test")


def test_put_then_list_header_flags(store):
    env = make_envelope(to=(BOB,))
    assert store.put_message(BOB, env, received_at=10)
    headers = store.list_headers(BOB)
    assert len(headers) == 1
    assert headers[0]["message_id"] == env.message_id
    assert headers[0]["flags"] == sorted(env.flags)


def test_list_is_insertion_ordered_by_received_at(store):
    envs = [make_envelope(to=(BOB,), subject=f"m{i}") for i in range(6)]
    for i, env in enumerate(envs):
        store.put_message(BOB, env, received_at=100 + i)
    subjects = [h["subject"] for h in store.list_headers(BOB)]
    assert subjects == [f"m{i}" for i in range(6)]


def test_header_projection_never_includes_body(store):
    body = b"S3CR3T-BODY-BYTES" * 10
    env = make_envelope(to=(BOB,), body=body)
    store.put_message(BOB, env)
    headers = store.list_headers(BOB)
    import json

    assert body not in json.dumps(headers).encode()
    # projection carries only header fields
    assert set(headers[0]) == {
        "message_id", "from", "subject", "sent_at", "flags",
        "received_at", "read", "attachment_count",
    }


def test_get_and_delete(store):
    env = make_envelope(to=(BOB,))
    store.put_message(BOB, env)
    assert store.get_message(BOB, env.message_id) == env
    store.delete_message(BOB, env.message_id)
    with pytest.raises(NotFound):
        store.get_message(BOB, env.message_id)


def test_delete_on_empty_mailbox_is_not_found(store):
    with pytest.raises(NotFound):
        store.delete_message(BOB, "0" * 32)


def test_put_requires_recipient_unless_sent_copy(store):
    env = make_envelope(to=(BOB,))
    with pytest.raises(StoreFailed):
        store.put_message(ALICE, env)
    assert store.put_message(ALICE, env, sent_copy=True)
    assert store.list_headers(ALICE) == []  # sent copies excluded by default
    assert len(store.list_headers(ALICE, include_sent=True)) == 1


def test_put_is_idempotent_per_mailbox(store):
    env = make_envelope(to=(BOB,))
    assert store.put_message(BOB, env)
    assert not store.put_message(BOB, env)
    assert store.message_count(BOB) == 1


# -------------------------------------------------------------- attachments


def test_attachment_round_trip(store):
    blob = b"attachment bytes"
    record = store.put_attachment(blob, "report", {"bob@beta.test"})
    got = store.get_attachment(record.guid, BOB)
    assert got.blob == blob
    # digest verified against an independent hash tool
    assert got.digest == hashlib.sha256(blob).hexdigest()


def test_attachment_acl_denied(store):
    record = store.put_attachment(b"x", "d", {"bob@beta.test"})
    with pytest.raises(PermissionDenied):
        store.get_attachment(record.guid, ALICE)


def test_attachment_declared_hash_checked(store):
    with pytest.raises(HashMismatch):
        store.put_attachment(b"x", "d", {"a@b.test"}, declared_digest="00" * 32)


def test_attachment_corruption_detected(store):
    record = store.put_attachment(b"precious", "d", {"bob@beta.test"})
    store.corrupt_attachment_for_test(record.guid)
    with pytest.raises(HashMismatch):
        store.get_attachment(record.guid, BOB)


def test_attachment_not_found(store):
    with pytest.raises(NotFound):
        store.get_attachment("f" * 32, BOB)


def test_attachment_empty_acl_rejected(store):
    with pytest.raises(StoreFailed):
        store.put_attachment(b"x", "d", set())


def test_acl_soundness_random_sequences(store):
    rng = random.Random(7)
    principals = [f"u{i}@p.test" for i in range(6)]
    guids = {}
    for i in range(40):
        acl = set(rng.sample(principals, rng.randint(1, 3)))
        record = store.put_attachment(f"blob{i}".encode(), "d", acl)
        guids[record.guid] = acl
    for _ in range(400):
        guid = rng.choice(list(guids))
        who = rng.choice(principals)
        try:
            got = store.get_attachment(guid, Address.parse(who))
            assert who in guids[guid]
        except PermissionDenied:
            assert who not in guids[guid]


# -------------------------------------------------------------------- queue


def test_queue_retry_backoff_and_dead_letter(store):
    env = make_envelope(to=(BOB,))
    entry_id = store.enqueue(env, "beta.test")
    assert store.queue_size() == 1
    now = 0
    delays = []
    for attempt in range(5):
        entries = store.due_entries(now)
        if attempt < 4:
            assert [e.id for e in entries] == [entry_id]
        dead = store.mark_failed(entry_id, now)
        if attempt < 4:
            assert not dead
            (entry,) = store.due_entries(10**12)
            delays.append(entry.not_before - now)
            now = entry.not_before
        else:
            assert dead
    assert delays == [1000, 2000, 4000, 8000]
    assert store.queue_size() == 0
    assert [e.id for e in store.dead_letters()] == [entry_id]


def test_queue_not_before_gates_due(store):
    env = make_envelope(to=(BOB,))
    store.enqueue(env, "beta.test", not_before=500)
    assert store.due_entries(499) == []
    assert len(store.due_entries(500)) == 1


def test_queue_mark_delivered(store):
    env = make_envelope(to=(BOB,))
    entry_id = store.enqueue(env, "beta.test")
    store.mark_delivered(entry_id)
    assert store.queue_size() == 0


# ---------------------------------------------------------------- durability


def test_clean_restart_preserves_everything(tmp_path):
    env = make_envelope(to=(BOB,))
    store = MessageStore(tmp_path / "d")
    store.put_message(BOB, env, received_at=42)
    record = store.put_attachment(b"blob", "d", {"bob@beta.test"})
    store.enqueue(env, "beta.test")
    store.close()

    reopened = MessageStore(tmp_path / "d")
    try:
        assert reopened.get_message(BOB, env.message_id) == env
        assert reopened.get_attachment(record.guid, BOB).blob == b"blob"
        assert reopened.queue_size() == 1
    finally:
        reopened.close()
