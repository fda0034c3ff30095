"""Message model: envelopes, canonical encoding, detached signatures.

An envelope is an immutable value. Signing appends a signature block
over the canonical encoding of everything before it (all earlier blocks
included, the new block excluded), so each block seals the envelope
state in force when it was appended.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from . import canonical
from .clockutil import now_ms
from .errors import InvalidEnvelope, KeyMismatch
from .keys import SigningKey, VerifyKey

# Signature roles
AUTHOR = "AUTHOR"
ORIGIN_SERVER = "ORIGIN_SERVER"
APPROVER = "APPROVER"
ROLES = (AUTHOR, ORIGIN_SERVER, APPROVER)

# Envelope flags
INSTANT = "INSTANT"
HAS_FORM = "HAS_FORM"
HAS_ONDEMAND = "HAS_ONDEMAND"
FLAGS = (INSTANT, HAS_FORM, HAS_ONDEMAND)

FORM_HEADER = "form"

# Single-label domains permitted in test configurations.
_single_label_domains: set[str] = set()


def allow_single_label_domain(name: str) -> None:
    _single_label_domains.add(name)


def new_id() -> str:
    """Fresh 128-bit id as 32 lowercase hex chars."""
    return secrets.token_hex(16)


@dataclass(frozen=True, order=True)
class Address:
    local: str
    domain: str

    def __post_init__(self):
        if not self.local or not self.domain:
            raise InvalidEnvelope("address parts must be non-empty")
        if "@" in self.local or "@" in self.domain:
            raise InvalidEnvelope("address parts must not contain '@'")
        if "." not in self.domain and self.domain not in _single_label_domains:
            raise InvalidEnvelope(f"single-label domain not configured: {self.domain}")

    @classmethod
    def parse(cls, text: str) -> "Address":
        local, sep, domain = text.partition("@")
        if not sep:
            raise InvalidEnvelope(f"not an address: {text!r}")
        return cls(local, domain)

    def __str__(self) -> str:
        return f"{self.local}@{self.domain}"


@dataclass(frozen=True)
class BodyPart:
    content_type: str
    data: bytes

    def __post_init__(self):
        if not self.content_type:
            raise InvalidEnvelope("content_type must be non-empty")


@dataclass(frozen=True)
class AttachmentTicket:
    """Stand-in for a stripped attachment: fetch it later by guid."""

    guid: str
    size: int
    description: str
    hash_algorithm: str
    digest: str  # lowercase hex
    origin_server: str

    def to_wire(self) -> dict:
        return {
            "guid": self.guid,
            "size": self.size,
            "description": self.description,
            "hash": {"alg": self.hash_algorithm, "digest": self.digest},
            "origin": self.origin_server,
        }

    @classmethod
    def from_wire(cls, w: dict) -> "AttachmentTicket":
        return cls(
            guid=w["guid"],
            size=w["size"],
            description=w["description"],
            hash_algorithm=w["hash"]["alg"],
            digest=w["hash"]["digest"],
            origin_server=w["origin"],
        )


@dataclass(frozen=True)
class SignatureBlock:
    signer: str  # address or server name
    role: str
    key_id: str
    algorithm: str
    signed_at: int
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "signer": self.signer,
            "role": self.role,
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "signed_at": self.signed_at,
            "sig": canonical.b64(self.signature),
        }

    @classmethod
    def from_wire(cls, w: dict) -> "SignatureBlock":
        return cls(
            signer=w["signer"],
            role=w["role"],
            key_id=w["key_id"],
            algorithm=w["algorithm"],
            signed_at=w["signed_at"],
            signature=canonical.unb64(w["sig"]),
        )


@dataclass(frozen=True)
class Envelope:
    message_id: str
    sender: Address
    to: tuple[Address, ...]
    subject: str
    sent_at: int  # ms UTC
    body: tuple[BodyPart, ...] = ()
    flags: frozenset[str] = frozenset()
    attachments: tuple[AttachmentTicket, ...] = ()
    headers: tuple[tuple[str, canonical.Value], ...] = ()
    signatures: tuple[SignatureBlock, ...] = ()

    def validate(self) -> None:
        if len(self.message_id) != 32 or any(
            c not in "0123456789abcdef" for c in self.message_id
        ):
            raise InvalidEnvelope("message_id must be 32 lowercase hex chars")
        if not self.to:
            raise InvalidEnvelope("recipient list is empty")
        unknown = set(self.flags) - set(FLAGS)
        if unknown:
            raise InvalidEnvelope(f"unknown flags: {sorted(unknown)}")
        has_form_header = any(name == FORM_HEADER for name, _ in self.headers)
        if (HAS_FORM in self.flags) != has_form_header:
            raise InvalidEnvelope("HAS_FORM flag must match presence of form header")
        if self.sent_at < 0:
            raise InvalidEnvelope("sent_at must be non-negative")
        times = [b.signed_at for b in self.signatures]
        if any(b > a for b, a in zip(times, times[1:])):
            raise InvalidEnvelope("signature timestamps must be non-decreasing")

    def header(self, name: str) -> Optional[canonical.Value]:
        for hname, payload in self.headers:
            if hname == name:
                return payload
        return None

    def with_header(self, name: str, payload: canonical.Value) -> "Envelope":
        return replace(self, headers=self.headers + ((name, payload),))


def _wire_dict(env: Envelope, signature_count: int) -> dict:
    return {
        "message_id": env.message_id,
        "from": str(env.sender),
        "to": [str(a) for a in env.to],
        "subject": env.subject,
        "sent_at": env.sent_at,
        "body": [
            {"content_type": p.content_type, "data": canonical.b64(p.data)}
            for p in env.body
        ],
        "flags": sorted(env.flags),
        "attachments": [t.to_wire() for t in env.attachments],
        "headers": [[name, payload] for name, payload in env.headers],
        "signatures": [b.to_wire() for b in env.signatures[:signature_count]],
    }


def canonical_encode(env: Envelope, exclude_signatures_from: int | None = None) -> bytes:
    """Deterministic bytes for signing/verification.

    Includes signature blocks with index < exclude_signatures_from
    (default: all of them).
    """
    env.validate()
    count = len(env.signatures) if exclude_signatures_from is None else exclude_signatures_from
    if count > len(env.signatures) or count < 0:
        raise InvalidEnvelope("signature exclusion index out of range")
    return canonical.encode(_wire_dict(env, count))


def render(env: Envelope) -> bytes:
    """Full wire rendering, signatures included."""
    return canonical_encode(env)


def parse(data: bytes | str) -> Envelope:
    w = canonical.decode(data)
    try:
        env = Envelope(
            message_id=w["message_id"],
            sender=Address.parse(w["from"]),
            to=tuple(Address.parse(a) for a in w["to"]),
            subject=w["subject"],
            sent_at=w["sent_at"],
            body=tuple(
                BodyPart(p["content_type"], canonical.unb64(p["data"]))
                for p in w["body"]
            ),
            flags=frozenset(w["flags"]),
            attachments=tuple(AttachmentTicket.from_wire(t) for t in w["attachments"]),
            headers=tuple((h[0], h[1]) for h in w["headers"]),
            signatures=tuple(SignatureBlock.from_wire(b) for b in w["signatures"]),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise InvalidEnvelope(f"malformed envelope: {exc}") from exc
    env.validate()
    return env


def sign(
    env: Envelope,
    key: SigningKey,
    signer: str,
    role: str,
    expected_key_id: str | None = None,
    signed_at: int | None = None,
) -> Envelope:
    """Append one signature block; earlier blocks are untouched."""
    if role not in ROLES:
        raise InvalidEnvelope(f"unknown signature role: {role}")
    pub = key.public
    if expected_key_id is not None and pub.key_id != expected_key_id:
        raise KeyMismatch(f"key does not match registered key for {signer}")
    at = signed_at if signed_at is not None else now_ms()
    if env.signatures:
        at = max(at, env.signatures[-1].signed_at)
    data = canonical_encode(env, len(env.signatures))
    block = SignatureBlock(
        signer=signer,
        role=role,
        key_id=pub.key_id,
        algorithm=key.algorithm,
        signed_at=at,
        signature=key.sign(data),
    )
    return replace(env, signatures=env.signatures + (block,))


# Per-block verification states
VALID = "VALID"
INVALID = "INVALID"
UNKNOWN_KEY = "UNKNOWN_KEY"


@dataclass(frozen=True)
class VerifyReport:
    block_states: tuple[str, ...]
    authentic: bool

    @property
    def all_valid(self) -> bool:
        return bool(self.block_states) and all(s == VALID for s in self.block_states)


def verify(env: Envelope, trust) -> VerifyReport:
    """Check every signature block against a trust store.

    ``trust`` must provide resolve_key(key_id) returning an object with
    ``key`` (VerifyKey) and ``anchored`` (bool), or None for unknown ids.
    Overall authentic iff every block is VALID and at least one AUTHOR
    or ORIGIN_SERVER block's key chains to a trust anchor.
    """
    try:
        env.validate()
    except InvalidEnvelope:
        return VerifyReport((), False)
    states: list[str] = []
    anchored_core = False
    for i, block in enumerate(env.signatures):
        resolved = trust.resolve_key(block.key_id)
        if resolved is None:
            states.append(UNKNOWN_KEY)
            continue
        data = canonical_encode(env, i)
        if resolved.key.verify(block.signature, data):
            states.append(VALID)
            if block.role in (AUTHOR, ORIGIN_SERVER) and resolved.anchored:
                anchored_core = True
        else:
            states.append(INVALID)
    authentic = (
        bool(states) and all(s == VALID for s in states) and anchored_core
    )
    return VerifyReport(tuple(states), authentic)
