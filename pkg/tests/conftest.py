import pytest

from wsmail.envelope import Address, BodyPart, Envelope, new_id
from wsmail.keys import SigningKey


@pytest.fixture
def alice():
    return Address("alice", "alpha.test")


@pytest.fixture
def bob():
    return Address("bob", "beta.test")


@pytest.fixture
def alice_key():
    return SigningKey.generate()


@pytest.fixture
def bob_key():
    return SigningKey.generate()


def make_envelope(sender=None, to=None, subject="hello", body=b"hi", **kw):
    sender = sender or Address("alice", "alpha.test")
    to = to or (Address("bob", "beta.test"),)
    defaults = dict(
        message_id=new_id(),
        sender=sender,
        to=tuple(to),
        subject=subject,
        sent_at=1_700_000_000_000,
        body=(BodyPart("text/plain", body),),
    )
    defaults.update(kw)
    return Envelope(**defaults)


@pytest.fixture
def envelope():
    return make_envelope()
