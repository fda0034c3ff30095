"""Signature suite and key helpers.

One mandatory default suite: Ed25519 over raw 32-byte keys. The
algorithm tag travels with every signature block so additional suites
can be registered later without changing the wire format.

Key ids are the lowercase hex SHA-256 digest of the raw public key.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DEFAULT_ALGORITHM = "ed25519"


class SigningKey:
    """Private half of a signature-suite keypair."""

    algorithm = DEFAULT_ALGORITHM

    def __init__(self, priv: Ed25519PrivateKey):
        self._priv = priv

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SigningKey":
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    def to_bytes(self) -> bytes:
        from cryptography.hazmat.primitives import serialization

        return self._priv.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, data: bytes) -> bytes:
        return self._priv.sign(data)

    @property
    def public(self) -> "VerifyKey":
        return VerifyKey(self._priv.public_key())


class VerifyKey:
    """Public half; hashable by raw key bytes."""

    algorithm = DEFAULT_ALGORITHM

    def __init__(self, pub: Ed25519PublicKey):
        self._pub = pub
        self._raw = pub.public_bytes_raw()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VerifyKey":
        return cls(Ed25519PublicKey.from_public_bytes(raw))

    def to_bytes(self) -> bytes:
        return self._raw

    def verify(self, signature: bytes, data: bytes) -> bool:
        try:
            self._pub.verify(signature, data)
            return True
        except InvalidSignature:
            return False

    @property
    def key_id(self) -> str:
        return key_id_of(self._raw)

    def __eq__(self, other) -> bool:
        return isinstance(other, VerifyKey) and self._raw == other._raw

    def __hash__(self) -> int:
        return hash(self._raw)

    def __repr__(self) -> str:
        return f"VerifyKey({self.key_id[:12]})"


def key_id_of(raw_public_key: bytes) -> str:
    return hashlib.sha256(raw_public_key).hexdigest()
