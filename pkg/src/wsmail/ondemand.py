"""On-demand attachments.

Outbound: the sending pipeline strips binary attachment parts, stores
each blob under a fresh GUID with the recipient list as its ACL, and
injects an AttachmentTicket into the envelope.

Inbound: recipients fetch blobs through the "attach.fetch" extension,
presenting a federated token whose audience is the origin server. The
server verifies the token (replay-checked) and that the token subject
is in the blob's ACL.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

from . import canonical
from .envelope import HAS_ONDEMAND, AttachmentTicket, Envelope, new_id
from .errors import AuthFailed, HashMismatch, NotFound, PermissionDenied, PipelineRejected
from .plugins import PluginEnvironment, ServerPlugin
from .store import MessageStore, content_digest
from .trust import FederatedToken, ReplayCache, TrustStore, verify_token

ATTACHMENT_CONTENT_TYPE = "application/x-attachment"
DECLARED_HEADER = "attach.declared"
FETCH_EXTENSION_ID = "attach.fetch"

EventHook = Optional[Callable[[str, dict], None]]


def declare_attachment(description: str, blob: bytes, algorithm: str = "sha256") -> dict:
    """Client-side declaration carried alongside an attachment body part."""
    return {
        "description": description,
        "size": len(blob),
        "alg": algorithm,
        "digest": content_digest(blob, algorithm),
    }


class StripAttachmentsPlugin(ServerPlugin):
    """SENDING processor: replaces attachment body parts with tickets."""

    def __init__(self, store: MessageStore, server_name: str, emit: EventHook = None):
        self._store = store
        self._server = server_name
        self._emit = emit

    def on_sending(self, env: Envelope) -> Envelope:
        parts = [p for p in env.body if p.content_type == ATTACHMENT_CONTENT_TYPE]
        if not parts:
            return env
        declared = env.header(DECLARED_HEADER) or []
        if len(declared) != len(parts):
            raise PipelineRejected("attachment declarations do not match parts")
        acl = {str(a) for a in env.to}
        tickets = []
        for part, decl in zip(parts, declared):
            digest = content_digest(part.data, decl["alg"])
            if digest != decl["digest"] or len(part.data) != decl["size"]:
                raise PipelineRejected(
                    "declared attachment hash/size mismatch", code="PIPELINE_REJECTED"
                )
            record = self._store.put_attachment(
                part.data,
                decl["description"],
                acl,
                guid=new_id(),
                hash_algorithm=decl["alg"],
                declared_digest=decl["digest"],
            )
            tickets.append(
                AttachmentTicket(
                    guid=record.guid,
                    size=record.size,
                    description=record.description,
                    hash_algorithm=record.hash_algorithm,
                    digest=record.digest,
                    origin_server=self._server,
                )
            )
            if self._emit:
                self._emit(
                    "SEND_STRIPPED",
                    {
                        "sender": str(env.sender),
                        "guid": record.guid,
                        "digest": record.digest,
                        "acl": sorted(acl),
                    },
                )
        remaining = tuple(p for p in env.body if p.content_type != ATTACHMENT_CONTENT_TYPE)
        headers = tuple(h for h in env.headers if h[0] != DECLARED_HEADER)
        return replace(
            env,
            body=remaining,
            headers=headers,
            attachments=env.attachments + tuple(tickets),
            flags=env.flags | {HAS_ONDEMAND},
        )


class FetchAttachmentPlugin(ServerPlugin):
    """EXTENSION processor ("attach.fetch"): token-gated blob retrieval."""

    def __init__(
        self,
        store: MessageStore,
        server_name: str,
        trust: TrustStore,
        replay: ReplayCache,
        now: Callable[[], int],
        emit: EventHook = None,
    ):
        self._store = store
        self._server = server_name
        self._trust = trust
        self._replay = replay
        self._now = now
        self._emit = emit

    def on_extension(self, payload, environment: PluginEnvironment):
        guid = payload.get("guid") if isinstance(payload, dict) else None
        token_wire = payload.get("token") if isinstance(payload, dict) else None
        if not guid or not token_wire:
            raise AuthFailed("guid and token required")
        try:
            token = FederatedToken.from_wire(token_wire)
        except (KeyError, TypeError, ValueError) as exc:
            raise AuthFailed(f"malformed token: {exc}") from exc
        result = verify_token(
            token, self._trust, self._now(), self._server, self._replay
        )
        if not result.ok:
            if self._emit:
                self._emit("RETRIEVE_DENIED", {"guid": guid, "reason": result.reason})
            raise AuthFailed(result.reason)
        try:
            record = self._store.get_attachment(guid, token.subject)
        except (NotFound, PermissionDenied, HashMismatch) as exc:
            if self._emit:
                self._emit("RETRIEVE_DENIED", {"guid": guid, "reason": exc.code})
            raise
        if self._emit:
            self._emit(
                "RETRIEVE_OK",
                {
                    "guid": guid,
                    "digest": record.digest,
                    "subject": str(token.subject),
                },
            )
        meta = {
            "guid": record.guid,
            "size": record.size,
            "description": record.description,
            "hash": {"alg": record.hash_algorithm, "digest": record.digest},
        }
        return meta, [record.blob]


def verify_fetched_blob(ticket: AttachmentTicket, blob: bytes) -> None:
    """Client-side re-check of the ticket digest on receipt."""
    if content_digest(blob, ticket.hash_algorithm) != ticket.digest:
        raise HashMismatch("fetched blob does not match ticket digest")
