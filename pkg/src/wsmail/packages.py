"""Client plug-in packages: signed declarative form bundles.

A package is not code. It is a canonical document holding a form
schema, layout hints, spreadsheet-style computed fields, and routing
defaults. The manifest binds name/version/url to the artifact hash and
carries the publisher's signature; the client refuses anything whose
hash or signature does not verify.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import canonical
from .clockutil import now_ms
from .envelope import AUTHOR, SignatureBlock
from .errors import (
    BadSignature,
    FetchFailed,
    HashMismatch,
    SchemaViolation,
    UserDeclined,
)
from .keys import SigningKey, VerifyKey


@dataclass(frozen=True)
class PluginManifest:
    name: str
    version: str
    fetch_url: str
    code_hash: str  # sha256 hex of the package bytes
    publisher_key_id: str
    signature: SignatureBlock

    def payload(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "fetch_url": self.fetch_url,
            "code_hash": self.code_hash,
            "publisher_key_id": self.publisher_key_id,
        }

    def signed_bytes(self) -> bytes:
        return canonical.encode({"plugin_manifest": self.payload()})

    def to_wire(self) -> dict:
        w = self.payload()
        w["signature"] = self.signature.to_wire()
        return w

    @classmethod
    def from_wire(cls, w: dict) -> "PluginManifest":
        return cls(
            name=w["name"],
            version=w["version"],
            fetch_url=w["fetch_url"],
            code_hash=w["code_hash"],
            publisher_key_id=w["publisher_key_id"],
            signature=SignatureBlock.from_wire(w["signature"]),
        )


def make_manifest(
    name: str,
    version: str,
    fetch_url: str,
    artifact: bytes,
    publisher_key: SigningKey,
    publisher: str = "publisher",
) -> PluginManifest:
    code_hash = hashlib.sha256(artifact).hexdigest()
    unsigned = PluginManifest(
        name, version, fetch_url, code_hash, publisher_key.public.key_id, None  # type: ignore[arg-type]
    )
    block = SignatureBlock(
        signer=publisher,
        role=AUTHOR,
        key_id=publisher_key.public.key_id,
        algorithm=publisher_key.algorithm,
        signed_at=now_ms(),
        signature=publisher_key.sign(unsigned.signed_bytes()),
    )
    return PluginManifest(
        name, version, fetch_url, code_hash, publisher_key.public.key_id, block
    )


def verify_manifest(manifest: PluginManifest, trust) -> bool:
    """trust: anything with resolve_key(key_id) -> .key or None."""
    if manifest.signature.key_id != manifest.publisher_key_id:
        return False
    resolved = trust.resolve_key(manifest.publisher_key_id)
    if resolved is None:
        return False
    return resolved.key.verify(manifest.signature.signature, manifest.signed_bytes())


# ------------------------------------------------------------- expressions


class _ExprParser:
    """Tiny arithmetic expressions over form fields: idents, integer
    literals, + - * / and parentheses."""

    def __init__(self, text: str):
        self.tokens = self._lex(text)
        self.pos = 0

    @staticmethod
    def _lex(text: str) -> list[str]:
        tokens, i = [], 0
        while i < len(text):
            c = text[i]
            if c.isspace():
                i += 1
            elif c in "+-*/()":
                tokens.append(c)
                i += 1
            elif c.isdigit():
                j = i
                while j < len(text) and text[j].isdigit():
                    j += 1
                tokens.append(text[i:j])
                i = j
            elif c.isalpha() or c == "_":
                j = i
                while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                    j += 1
                tokens.append(text[i:j])
                i = j
            else:
                raise SchemaViolation(f"bad character in expression: {c!r}")
        return tokens

    def _peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self) -> str:
        tok = self._peek()
        if tok is None:
            raise SchemaViolation("unexpected end of expression")
        self.pos += 1
        return tok

    def parse(self, fields: dict) -> int:
        value = self._expr(fields)
        if self._peek() is not None:
            raise SchemaViolation(f"trailing tokens: {self.tokens[self.pos:]}")
        return value

    def _expr(self, fields) -> int:
        value = self._term(fields)
        while self._peek() in ("+", "-"):
            op = self._next()
            rhs = self._term(fields)
            value = value + rhs if op == "+" else value - rhs
        return value

    def _term(self, fields) -> int:
        value = self._factor(fields)
        while self._peek() in ("*", "/"):
            op = self._next()
            rhs = self._factor(fields)
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise SchemaViolation("division by zero")
                value = value // rhs
        return value

    def _factor(self, fields) -> int:
        tok = self._next()
        if tok == "(":
            value = self._expr(fields)
            if self._next() != ")":
                raise SchemaViolation("unbalanced parentheses")
            return value
        if tok == "-":
            return -self._factor(fields)
        if tok.isdigit():
            return int(tok)
        if tok[0].isalpha() or tok[0] == "_":
            value = fields.get(tok)
            if not isinstance(value, int) or isinstance(value, bool):
                raise SchemaViolation(f"field {tok} is not an integer")
            return value
        raise SchemaViolation(f"unexpected token {tok!r}")


def evaluate_expression(expr: str, fields: dict) -> int:
    return _ExprParser(expr).parse(fields)


# ------------------------------------------------------------ form packages

_FIELD_TYPES = {"string", "int", "bool"}


@dataclass(frozen=True)
class FormPackage:
    """Declarative form definition carried inside a plug-in package."""

    form_type: str
    schema_version: str
    fields: tuple[dict, ...]  # {name, type, required}
    layout: tuple[dict, ...] = ()  # UI hints, opaque here
    computed: tuple[dict, ...] = ()  # {name, expr}
    route_defaults: tuple[str, ...] = ()

    def to_wire(self) -> dict:
        return {
            "form_type": self.form_type,
            "schema_version": self.schema_version,
            "fields": list(self.fields),
            "layout": list(self.layout),
            "computed": list(self.computed),
            "route_defaults": list(self.route_defaults),
        }

    @classmethod
    def from_wire(cls, w: dict) -> "FormPackage":
        pkg = cls(
            form_type=w["form_type"],
            schema_version=w["schema_version"],
            fields=tuple(w["fields"]),
            layout=tuple(w.get("layout", ())),
            computed=tuple(w.get("computed", ())),
            route_defaults=tuple(w.get("route_defaults", ())),
        )
        for f in pkg.fields:
            if f.get("type") not in _FIELD_TYPES:
                raise SchemaViolation(f"unknown field type: {f.get('type')}")
        return pkg

    def encode(self) -> bytes:
        return canonical.encode({"form_package": self.to_wire()})

    @classmethod
    def decode(cls, data: bytes) -> "FormPackage":
        doc = canonical.decode(data)
        if not isinstance(doc, dict) or "form_package" not in doc:
            raise SchemaViolation("not a form package")
        return cls.from_wire(doc["form_package"])

    def validate_payload(self, payload: dict) -> None:
        if not isinstance(payload, dict):
            raise SchemaViolation("payload must be a map")
        known = {f["name"] for f in self.fields}
        for f in self.fields:
            name = f["name"]
            if f.get("required", False) and name not in payload:
                raise SchemaViolation(f"missing required field {name}")
            if name in payload:
                value = payload[name]
                ftype = f["type"]
                ok = (
                    (ftype == "string" and isinstance(value, str))
                    or (ftype == "int" and isinstance(value, int) and not isinstance(value, bool))
                    or (ftype == "bool" and isinstance(value, bool))
                )
                if not ok:
                    raise SchemaViolation(f"field {name} is not a {ftype}")
        extra = set(payload) - known
        if extra:
            raise SchemaViolation(f"unknown fields: {sorted(extra)}")

    def evaluate_computed(self, payload: dict) -> dict:
        values = dict(payload)
        out = {}
        for rule in self.computed:
            out[rule["name"]] = evaluate_expression(rule["expr"], values)
            values[rule["name"]] = out[rule["name"]]
        return out


# ---------------------------------------------------------- client registry

Fetcher = Callable[[str], bytes]
ApprovalCallback = Callable[[PluginManifest], bool]


class ClientPluginRegistry:
    """Persistent (name, version) -> {manifest, installed, approved} map."""

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._lock = threading.RLock()
        self._entries: dict[str, dict] = {}
        if self._path.exists():
            self._entries = canonical.decode(self._path.read_bytes())

    @staticmethod
    def _key(name: str, version: str) -> str:
        return f"{name}@{version}"

    def _save(self) -> None:
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_bytes(canonical.encode(self._entries))

    def lookup(self, name: str, version: str) -> Optional[dict]:
        with self._lock:
            return self._entries.get(self._key(name, version))

    def list_installed(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "name": e["manifest"]["name"],
                    "version": e["manifest"]["version"],
                    "publisher": e["manifest"]["publisher_key_id"],
                    "installed": bool(e.get("installed")),
                    "approved": bool(e.get("approved")),
                }
                for e in self._entries.values()
            ]

    def installed_package(self, name: str, version: str) -> Optional[FormPackage]:
        entry = self.lookup(name, version)
        if entry is None or not entry.get("installed"):
            return None
        return FormPackage.decode(canonical.unb64(entry["artifact"]))

    def acquire(
        self,
        manifest: PluginManifest,
        fetch: Fetcher,
        approve: ApprovalCallback,
        trust,
    ) -> FormPackage:
        """Fetch, verify, approve, install. Cache hit skips the fetch."""
        with self._lock:
            cached = self.lookup(manifest.name, manifest.version)
            if cached and cached.get("installed"):
                if cached["manifest"]["code_hash"] == manifest.code_hash:
                    return FormPackage.decode(canonical.unb64(cached["artifact"]))
            if not verify_manifest(manifest, trust):
                raise BadSignature(f"manifest for {manifest.name} fails verification")
            if not (cached and cached.get("approved")):
                if not approve(manifest):
                    raise UserDeclined(manifest.name)
            try:
                artifact = fetch(manifest.fetch_url)
            except Exception as exc:
                raise FetchFailed(str(exc)) from exc
            if hashlib.sha256(artifact).hexdigest() != manifest.code_hash:
                raise HashMismatch("fetched artifact does not match manifest hash")
            package = FormPackage.decode(artifact)
            self._entries[self._key(manifest.name, manifest.version)] = {
                "manifest": manifest.to_wire(),
                "installed": True,
                "approved": True,
                "artifact": canonical.b64(artifact),
            }
            self._save()
            return package
