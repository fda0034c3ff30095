"""Three-tier trust: user credentials, server cert chains, root anchors.

Tier 1: users authenticate to their home server by password, public key
challenge, or federated token. Tier 2: servers hold cert chains. Tier 3:
chains terminate at root anchors shared out of band (the "prior
arrangement" between domains is each side holding the other's anchor).

Cert chains are not X.509: a chain is an ordered list of (name, key)
links, each signed by the next link's key, the last by a root anchor.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import canonical
from .clockutil import now_ms as _now_ms
from .envelope import (
    ORIGIN_SERVER,
    Address,
    Envelope,
    SignatureBlock,
    canonical_encode,
    new_id,
)
from .errors import UnknownSubject, UnknownUser
from .keys import SigningKey, VerifyKey

# credential methods
PASSWORD = "PASSWORD"
PUBLIC_KEY = "PUBLIC_KEY"
FEDERATED = "FEDERATED"

# auth result reasons
ACCEPT = "ACCEPT"
REJECT = "REJECT"
EXPIRED = "EXPIRED"
AUDIENCE_MISMATCH = "AUDIENCE_MISMATCH"
UNKNOWN_ISSUER = "UNKNOWN_ISSUER"
REPLAYED = "REPLAYED"
INVALID = "INVALID"
METHOD_MISMATCH = "METHOD_MISMATCH"

DEFAULT_TOKEN_TTL_MS = 600_000  # 600 s

# scrypt parameters, fixed so stored hashes stay comparable
_SCRYPT_N = 2**14
_SCRYPT_R = 8
_SCRYPT_P = 1
_HASH_LEN = 32
_SALT_LEN = 16


@dataclass(frozen=True)
class AuthResult:
    ok: bool
    reason: str

    @classmethod
    def accept(cls) -> "AuthResult":
        return cls(True, ACCEPT)

    @classmethod
    def reject(cls, reason: str = REJECT) -> "AuthResult":
        return cls(False, reason)


def hash_password(password: str, salt: bytes | None = None) -> tuple[bytes, bytes]:
    salt = salt if salt is not None else secrets.token_bytes(_SALT_LEN)
    digest = hashlib.scrypt(
        password.encode("utf-8"),
        salt=salt,
        n=_SCRYPT_N,
        r=_SCRYPT_R,
        p=_SCRYPT_P,
        dklen=_HASH_LEN,
    )
    return salt, digest


def check_password(password: str, salt: bytes, expected: bytes) -> bool:
    _, digest = hash_password(password, salt)
    # constant-time in the length of the hash
    return hmac.compare_digest(digest, expected)


@dataclass(frozen=True)
class UserCredentialRecord:
    address: Address
    method: str
    password_salt: Optional[bytes] = None
    password_hash: Optional[bytes] = None
    public_key: Optional[VerifyKey] = None

    def __post_init__(self):
        if self.method == PASSWORD and (
            self.password_salt is None or self.password_hash is None
        ):
            raise ValueError("PASSWORD method requires salt and hash")
        if self.method == PUBLIC_KEY and self.public_key is None:
            raise ValueError("PUBLIC_KEY method requires a public key")


@dataclass(frozen=True)
class CertLink:
    name: str
    key: VerifyKey
    signature: bytes  # by the parent link's key (or the anchor for the last link)

    def signed_payload(self) -> bytes:
        return canonical.encode(
            {"cert": {"name": self.name, "key": canonical.b64(self.key.to_bytes())}}
        )


@dataclass(frozen=True)
class CertChain:
    links: tuple[CertLink, ...]  # leaf first
    anchor: str

    @property
    def leaf(self) -> CertLink:
        return self.links[0]

    def to_wire(self) -> dict:
        return {
            "anchor": self.anchor,
            "links": [
                {
                    "name": l.name,
                    "key": canonical.b64(l.key.to_bytes()),
                    "sig": canonical.b64(l.signature),
                }
                for l in self.links
            ],
        }

    @classmethod
    def from_wire(cls, w: dict) -> "CertChain":
        return cls(
            links=tuple(
                CertLink(
                    l["name"],
                    VerifyKey.from_bytes(canonical.unb64(l["key"])),
                    canonical.unb64(l["sig"]),
                )
                for l in w["links"]
            ),
            anchor=w["anchor"],
        )


def make_chain(
    leaf_name: str,
    leaf_key: VerifyKey,
    signers: list[tuple[str, SigningKey]],
    anchor_name: str,
    anchor_key: SigningKey,
) -> CertChain:
    """Build a chain: leaf signed by signers[0], ..., last signed by anchor."""
    names = [leaf_name] + [n for n, _ in signers]
    keys = [leaf_key] + [k.public for _, k in signers]
    parents = [k for _, k in signers] + [anchor_key]
    links = []
    for name, key, parent in zip(names, keys, parents):
        payload = canonical.encode(
            {"cert": {"name": name, "key": canonical.b64(key.to_bytes())}}
        )
        links.append(CertLink(name, key, parent.sign(payload)))
    return CertChain(tuple(links), anchor_name)


@dataclass(frozen=True)
class FederatedToken:
    """Short-lived credential issued by a user's home server."""

    issuer: str
    subject: Address
    audience: str
    issued_at: int
    expires_at: int
    token_id: str
    signature: SignatureBlock

    def payload(self) -> dict:
        return {
            "issuer": self.issuer,
            "subject": str(self.subject),
            "audience": self.audience,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "token_id": self.token_id,
        }

    def signed_bytes(self) -> bytes:
        return canonical.encode({"token": self.payload()})

    def to_wire(self) -> dict:
        w = self.payload()
        w["signature"] = self.signature.to_wire()
        return w

    @classmethod
    def from_wire(cls, w: dict) -> "FederatedToken":
        return cls(
            issuer=w["issuer"],
            subject=Address.parse(w["subject"]),
            audience=w["audience"],
            issued_at=w["issued_at"],
            expires_at=w["expires_at"],
            token_id=w["token_id"],
            signature=SignatureBlock.from_wire(w["signature"]),
        )


@dataclass(frozen=True)
class ResolvedKey:
    key: VerifyKey
    anchored: bool


class TrustStore:
    """Read-mostly trust configuration with exclusive-write updates."""

    def __init__(self):
        self._lock = threading.RLock()
        self.root_anchors: dict[str, VerifyKey] = {}
        self.server_certs: dict[str, CertChain] = {}
        self.user_directory: dict[str, UserCredentialRecord] = {}
        self._key_index: dict[str, ResolvedKey] = {}

    # -- mutation -----------------------------------------------------

    def add_anchor(self, name: str, key: VerifyKey) -> None:
        with self._lock:
            self.root_anchors[name] = key
            self._reindex()

    def add_server_chain(self, name: str, chain: CertChain) -> None:
        with self._lock:
            if name in self.server_certs:
                raise ValueError(f"duplicate server name: {name}")
            if not self.chain_valid(chain):
                raise ValueError(f"chain for {name} does not reach a root anchor")
            self.server_certs[name] = chain
            self._reindex()

    def add_user(self, record: UserCredentialRecord) -> None:
        with self._lock:
            self.user_directory[str(record.address)] = record
            self._reindex()

    def _reindex(self) -> None:
        index: dict[str, ResolvedKey] = {}
        for key in self.root_anchors.values():
            index[key.key_id] = ResolvedKey(key, True)
        for record in self.user_directory.values():
            if record.public_key is not None:
                index[record.public_key.key_id] = ResolvedKey(record.public_key, True)
        for chain in self.server_certs.values():
            anchored = self.chain_valid(chain)
            index[chain.leaf.key.key_id] = ResolvedKey(chain.leaf.key, anchored)
        self._key_index = index

    # -- lookup -------------------------------------------------------

    def resolve_key(self, key_id: str) -> Optional[ResolvedKey]:
        with self._lock:
            return self._key_index.get(key_id)

    def user(self, address: Address | str) -> Optional[UserCredentialRecord]:
        with self._lock:
            return self.user_directory.get(str(address))

    def server_key(self, name: str) -> Optional[VerifyKey]:
        with self._lock:
            chain = self.server_certs.get(name)
            return chain.leaf.key if chain else None

    def chain_valid(self, chain: CertChain) -> bool:
        """Each link signed by the next; final link signed by a root anchor."""
        if not chain.links:
            return False
        anchor_key = self.root_anchors.get(chain.anchor)
        if anchor_key is None:
            return False
        for link, parent in zip(chain.links, chain.links[1:]):
            if not parent.key.verify(link.signature, link.signed_payload()):
                return False
        last = chain.links[-1]
        return anchor_key.verify(last.signature, last.signed_payload())


class ReplayCache:
    """Per-verifier token-id cache with atomic test-and-insert."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seen: dict[str, int] = {}  # token_id -> expires_at

    def check_and_insert(self, token_id: str, expires_at: int, now: int) -> bool:
        """True iff token_id was not already accepted. Prunes expired ids."""
        with self._lock:
            if self._seen:
                dead = [tid for tid, exp in self._seen.items() if exp <= now]
                for tid in dead:
                    del self._seen[tid]
            if token_id in self._seen:
                return False
            self._seen[token_id] = expires_at
            return True

    def __len__(self) -> int:
        with self._lock:
            return len(self._seen)


def valid_origin_signature(env: Envelope, trust: "TrustStore") -> bool:
    """True iff some ORIGIN_SERVER block was made by the *server* of the
    claimed sender's domain, under that server's certified key.

    A merely registered key is not enough: user keys appear in the key
    index too, and accepting them here would let any account forge
    relayed mail.
    """
    for i, block in enumerate(env.signatures):
        if block.role != ORIGIN_SERVER or block.signer != env.sender.domain:
            continue
        server_key = trust.server_key(block.signer)
        if server_key is None or server_key.key_id != block.key_id:
            continue
        chain = trust.server_certs.get(block.signer)
        if chain is None or not trust.chain_valid(chain):
            continue
        if server_key.verify(block.signature, canonical_encode(env, i)):
            return True
    return False


def issue_federated_token(
    issuer: str,
    issuer_key: SigningKey,
    subject: Address,
    audience: str,
    trust: TrustStore,
    ttl_ms: int = DEFAULT_TOKEN_TTL_MS,
    now: int | None = None,
) -> FederatedToken:
    """Issue a token recognized by ``audience`` through shared anchors."""
    if trust.server_certs.get(issuer) is None:
        raise UnknownSubject(f"issuer {issuer} has no cert chain", code="UNKNOWN_ISSUER")
    if trust.user(subject) is None or subject.domain != issuer:
        raise UnknownSubject(f"{subject} is not a local user of {issuer}")
    issued_at = now if now is not None else _now_ms()
    token_id = new_id()
    unsigned = FederatedToken(
        issuer=issuer,
        subject=subject,
        audience=audience,
        issued_at=issued_at,
        expires_at=issued_at + ttl_ms,
        token_id=token_id,
        signature=None,  # type: ignore[arg-type]
    )
    block = SignatureBlock(
        signer=issuer,
        role=ORIGIN_SERVER,
        key_id=issuer_key.public.key_id,
        algorithm=issuer_key.algorithm,
        signed_at=issued_at,
        signature=issuer_key.sign(unsigned.signed_bytes()),
    )
    return FederatedToken(**{**unsigned.__dict__, "signature": block})


def verify_token(
    token: FederatedToken,
    trust: TrustStore,
    now: int,
    expected_audience: str,
    replay: ReplayCache | None = None,
) -> AuthResult:
    """Full token check: issuer chain, signature, window, audience, replay.

    Validity window is half-open: issued_at <= now < expires_at.
    """
    chain = trust.server_certs.get(token.issuer)
    if chain is None or not trust.chain_valid(chain):
        return AuthResult.reject(UNKNOWN_ISSUER)
    if chain.leaf.key.key_id != token.signature.key_id:
        return AuthResult.reject(UNKNOWN_ISSUER)
    if not chain.leaf.key.verify(token.signature.signature, token.signed_bytes()):
        return AuthResult.reject(INVALID)
    if token.audience != expected_audience:
        return AuthResult.reject(AUDIENCE_MISMATCH)
    if not (token.issued_at <= now < token.expires_at):
        return AuthResult.reject(EXPIRED)
    if replay is not None and not replay.check_and_insert(
        token.token_id, token.expires_at, now
    ):
        return AuthResult.reject(REPLAYED)
    return AuthResult.accept()


def authenticate_user(
    credential: dict,
    record: Optional[UserCredentialRecord],
    trust: TrustStore | None = None,
    replay: ReplayCache | None = None,
    now: int | None = None,
    expected_audience: str | None = None,
) -> AuthResult:
    """Check a presented credential against a directory record.

    Credential shapes:
      {"method": "PASSWORD", "password": str}
      {"method": "PUBLIC_KEY", "challenge": bytes, "signature": bytes}
      {"method": "FEDERATED", "token": FederatedToken}
    """
    if record is None:
        raise UnknownUser()
    method = credential.get("method")
    if method != record.method:
        return AuthResult.reject(METHOD_MISMATCH)
    if method == PASSWORD:
        password = credential.get("password", "")
        if password and check_password(
            password, record.password_salt, record.password_hash
        ):
            return AuthResult.accept()
        return AuthResult.reject()
    if method == PUBLIC_KEY:
        challenge = credential.get("challenge", b"")
        signature = credential.get("signature", b"")
        if challenge and record.public_key.verify(signature, challenge):
            return AuthResult.accept()
        return AuthResult.reject()
    if method == FEDERATED:
        token = credential.get("token")
        if token is None or trust is None:
            return AuthResult.reject(INVALID)
        if token.subject != record.address:
            return AuthResult.reject(INVALID)
        return verify_token(
            token,
            trust,
            now if now is not None else _now_ms(),
            expected_audience or token.audience,
            replay,
        )
    return AuthResult.reject(METHOD_MISMATCH)


# ---------------------------------------------------------------- config IO


def trust_to_wire(trust: TrustStore) -> dict:
    return {
        "anchors": [
            {"name": n, "key": canonical.b64(k.to_bytes())}
            for n, k in sorted(trust.root_anchors.items())
        ],
        "servers": [
            {"name": n, "chain": c.to_wire()}
            for n, c in sorted(trust.server_certs.items())
        ],
        "users": [
            {
                "address": addr,
                "method": r.method,
                "salt": canonical.b64(r.password_salt) if r.password_salt else None,
                "hash": canonical.b64(r.password_hash) if r.password_hash else None,
                "public_key": canonical.b64(r.public_key.to_bytes())
                if r.public_key
                else None,
            }
            for addr, r in sorted(trust.user_directory.items())
        ],
    }


def trust_from_wire(w: dict) -> TrustStore:
    trust = TrustStore()
    for a in w.get("anchors", []):
        trust.add_anchor(a["name"], VerifyKey.from_bytes(canonical.unb64(a["key"])))
    for s in w.get("servers", []):
        trust.add_server_chain(s["name"], CertChain.from_wire(s["chain"]))
    for u in w.get("users", []):
        trust.add_user(
            UserCredentialRecord(
                address=Address.parse(u["address"]),
                method=u["method"],
                password_salt=canonical.unb64(u["salt"]) if u.get("salt") else None,
                password_hash=canonical.unb64(u["hash"]) if u.get("hash") else None,
                public_key=VerifyKey.from_bytes(canonical.unb64(u["public_key"]))
                if u.get("public_key")
                else None,
            )
        )
    return trust


def save_trust(trust: TrustStore, path: str | Path) -> None:
    Path(path).write_bytes(canonical.encode(trust_to_wire(trust)))


def load_trust(path: str | Path) -> TrustStore:
    return trust_from_wire(canonical.decode(Path(path).read_bytes()))
