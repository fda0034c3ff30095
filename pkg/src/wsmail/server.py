"""The server daemon: accepts RPC verbs, authenticates callers, runs the
plug-in pipelines, stores local mail, and relays queued mail to peer
domains with retry/backoff.

A receipt from SEND means the message was queued (or locally
delivered), not that a remote recipient has it; delivery status is
observable only through the recipient's mailbox.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import canonical, envelope as env_mod
from .clockutil import Clock, SYSTEM_CLOCK
from .envelope import AUTHOR, ORIGIN_SERVER, Address, Envelope
from .errors import (
    AuthFailed,
    BadOriginSignature,
    NotFound,
    PermissionDenied,
    PipelineRejected,
    UnknownRecipient,
    WsmailError,
)
from .im import (
    InstantDeliveryPlugin,
    PartyLinePlugin,
    PresencePlugin,
    PresenceTable,
    PARTYLINE_EXTENSION_ID,
    PRESENCE_EXTENSION_ID,
)
from .keys import SigningKey
from .ondemand import (
    FETCH_EXTENSION_ID,
    FetchAttachmentPlugin,
    StripAttachmentsPlugin,
)
from .plugins import (
    DELIVERY,
    EXTENSION,
    HANDLED,
    PASS,
    SENDING,
    PluginEnvironment,
    PluginRegistry,
    ServerPluginRegistration,
)
from .store import MessageStore
from .transport import (
    DEFAULT_FRAME_LIMIT,
    DELIVER,
    DELETE,
    EXTENSION as EXTENSION_VERB,
    LIST,
    RETRIEVE,
    SEND,
    TOKEN_REQUEST,
    Meter,
    RouteRecord,
    RpcRequest,
    RpcResponse,
    RpcServer,
    call_domain,
    load_routes,
    make_server_auth,
    verify_server_auth,
)
from .trust import (
    FederatedToken,
    valid_origin_signature,
    PASSWORD,
    ReplayCache,
    TrustStore,
    authenticate_user,
    issue_federated_token,
    load_trust,
    verify_token,
)

log = logging.getLogger(__name__)

EventHook = Callable[[str, dict], None]


@dataclass
class ServerConfig:
    name: str
    listen: tuple[str, int] = ("127.0.0.1", 0)
    trust_path: Optional[str] = None
    routes_path: Optional[str] = None
    plugin_config_path: Optional[str] = None
    data_dir: str = "."
    key_path: Optional[str] = None
    frame_limit: int = DEFAULT_FRAME_LIMIT
    max_attempts: int = 5
    admins: tuple[str, ...] = ()
    discard_inbound: bool = False  # load-generator peers skip store writes

    @classmethod
    def from_file(cls, path: str | Path) -> "ServerConfig":
        doc = json.loads(Path(path).read_text())
        return cls(
            name=doc["name"],
            listen=(doc.get("listen", ["127.0.0.1", 0])[0], int(doc.get("listen", [0, 0])[1])),
            trust_path=doc.get("trust"),
            routes_path=doc.get("routes"),
            plugin_config_path=doc.get("plugins"),
            data_dir=doc.get("data_dir", "."),
            key_path=doc.get("key"),
            frame_limit=doc.get("frame_limit", DEFAULT_FRAME_LIMIT),
            max_attempts=doc.get("max_attempts", 5),
            admins=tuple(doc.get("admins", ())),
            discard_inbound=bool(doc.get("discard_inbound", False)),
        )


DEFAULT_PLUGIN_CONFIG = [
    {"name": "ondemand.strip", "kinds": ["SENDING"], "priority": 10},
    {"name": "im.instant", "kinds": ["DELIVERY"], "priority": 10},
    {"name": "im.presence", "kinds": ["EXTENSION"], "extension_id": PRESENCE_EXTENSION_ID},
    {"name": "im.partyline", "kinds": ["EXTENSION"], "extension_id": PARTYLINE_EXTENSION_ID},
    {"name": "ondemand.fetch", "kinds": ["EXTENSION"], "extension_id": FETCH_EXTENSION_ID},
]


class MtaServer:
    def __init__(
        self,
        name: str,
        key: SigningKey,
        trust: TrustStore,
        routes: list[RouteRecord],
        data_dir: str | Path,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        clock: Clock = SYSTEM_CLOCK,
        frame_limit: int = DEFAULT_FRAME_LIMIT,
        max_attempts: int = 5,
        admins: tuple[str, ...] = (),
        discard_inbound: bool = False,
        plugin_config: list[dict] | None = None,
        meter: Meter | None = None,
        rng: random.Random | None = None,
    ):
        self.name = name
        self.key = key
        self.trust = trust
        self.routes = routes
        self.clock = clock
        self.max_attempts = max_attempts
        self.admins = set(admins)
        self.discard_inbound = discard_inbound
        self.store = MessageStore(data_dir)
        self.replay = ReplayCache()
        self.presence = PresenceTable()
        self.registry = PluginRegistry()
        self._rng = rng or random.Random()
        self._hooks: list[EventHook] = []
        self._rpc = RpcServer(listen[0], listen[1], self._handle, frame_limit, meter)
        self._queue_stop = threading.Event()
        self._queue_thread: threading.Thread | None = None
        self._partyline: PartyLinePlugin | None = None
        self._load_plugins(plugin_config if plugin_config is not None else DEFAULT_PLUGIN_CONFIG)

    # ----------------------------------------------------------- plumbing

    @property
    def endpoint(self) -> tuple[str, int]:
        return self._rpc.endpoint

    def subscribe(self, hook: EventHook) -> None:
        self._hooks.append(hook)

    def emit(self, kind: str, **fields) -> None:
        record = {"event": kind, "server": self.name, "at": self.clock.now_ms(), **fields}
        log.info("%s", json.dumps(record, sort_keys=True))
        for hook in list(self._hooks):
            hook(kind, record)

    def _load_plugins(self, config: list[dict]) -> None:
        now = self.clock.now_ms
        builtins = {
            "ondemand.strip": lambda: StripAttachmentsPlugin(
                self.store, self.name, emit=lambda k, f: self.emit(k, **f)
            ),
            "ondemand.fetch": lambda: FetchAttachmentPlugin(
                self.store, self.name, self.trust, self.replay, now,
                emit=lambda k, f: self.emit(k, **f),
            ),
            "im.instant": lambda: InstantDeliveryPlugin(self.presence, now),
            "im.presence": lambda: PresencePlugin(self.presence, now),
            "im.partyline": lambda: PartyLinePlugin(self.presence, self.trust, now),
        }
        for entry in config:
            name = entry["name"]
            factory = builtins.get(name)
            if factory is None:
                raise WsmailError(f"unknown plug-in {name}", code="UNKNOWN_PLUGIN")
            plugin = factory()
            if name == "im.partyline":
                self._partyline = plugin
            self.registry.register(
                ServerPluginRegistration(
                    name=name,
                    kinds=frozenset(entry["kinds"]),
                    extension_id=entry.get("extension_id"),
                    queue_priority=entry.get("priority", 100),
                    enabled=entry.get("enabled", True),
                ),
                plugin,
            )

    def start(self) -> "MtaServer":
        self._rpc.start()
        self._queue_thread = threading.Thread(target=self._drain_queue, daemon=True)
        self._queue_thread.start()
        return self

    def stop(self) -> None:
        self._queue_stop.set()
        self._rpc.stop()
        if self._queue_thread:
            self._queue_thread.join(timeout=2)
        if self._partyline is not None:
            self._partyline.close()
        self.store.close()

    # ------------------------------------------------------------- auth

    def _authenticate(self, request: RpcRequest, chunks: list[bytes]) -> Optional[str]:
        """Returns the authenticated principal (address or peer server
        name), or raises AUTH_FAILED. EXTENSION requests may come in
        unauthenticated; extensions enforce their own policy."""
        auth = request.auth
        if not auth:
            if request.verb == EXTENSION_VERB:
                return None
            raise AuthFailed("missing credentials")
        kind = auth.get("kind")
        if kind == "server":
            peer = verify_server_auth(request, chunks, self.trust)
            if peer is None:
                raise AuthFailed("server authentication failed")
            return peer
        if kind == "password":
            address = auth.get("address", "")
            record = self.trust.user(address)
            if record is None:
                raise AuthFailed("unknown user")
            result = authenticate_user(
                {"method": PASSWORD, "password": auth.get("password", "")}, record
            )
            if not result.ok:
                raise AuthFailed(result.reason)
            return address
        if kind == "token":
            try:
                token = FederatedToken.from_wire(auth["token"])
            except (KeyError, TypeError, ValueError) as exc:
                raise AuthFailed(f"malformed token: {exc}") from exc
            result = verify_token(
                token, self.trust, self.clock.now_ms(), self.name, self.replay
            )
            if not result.ok:
                raise AuthFailed(result.reason)
            return str(token.subject)
        raise AuthFailed(f"unknown auth kind {kind!r}")

    # ------------------------------------------------------------ handler

    def _handle(
        self, request: RpcRequest, chunks: list[bytes], endpoint
    ) -> tuple[RpcResponse, list[bytes]]:
        verb = request.verb
        if verb == SEND:
            return self.handle_send(request, chunks), []
        if verb == DELIVER:
            return self.handle_deliver(request, chunks), []
        if verb == LIST:
            return self.handle_list(request, chunks), []
        if verb == RETRIEVE:
            return self.handle_retrieve(request, chunks), []
        if verb == DELETE:
            return self.handle_delete(request, chunks), []
        if verb == TOKEN_REQUEST:
            return self.handle_token_request(request, chunks), []
        if verb == EXTENSION_VERB:
            return self.handle_extension(request, chunks)
        return RpcResponse.error("MALFORMED_FRAME"), []

    # -------------------------------------------------------------- send

    def handle_send(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        principal = self._authenticate(request, chunks)
        env = env_mod.parse(canonical.encode(request.payload))
        if str(env.sender) != principal:
            raise AuthFailed("sender does not match authenticated principal")
        record = self.trust.user(env.sender)
        if record is not None and record.public_key is not None:
            author_blocks = [b for b in env.signatures if b.role == AUTHOR]
            if not author_blocks or not any(
                b.key_id == record.public_key.key_id for b in author_blocks
            ):
                raise AuthFailed("author signature missing or wrong key")
            report = env_mod.verify(env, self.trust)
            if not report.all_valid:
                raise AuthFailed("author signature invalid")
        env = self.registry.dispatch_sending(env)
        env = env_mod.sign(
            env, self.key, self.name, ORIGIN_SERVER, signed_at=self.clock.now_ms()
        )
        delivered_local: list[str] = []
        queued: list[str] = []
        for recipient in env.to:
            if recipient.domain == self.name:
                if self.trust.user(recipient) is None:
                    self.emit("UNKNOWN_RECIPIENT", recipient=str(recipient))
                    continue
                self._deliver_local(env, recipient, delivered_local)
            else:
                if recipient.domain not in queued:
                    self.store.enqueue(env, recipient.domain)
                    queued.append(recipient.domain)
                    self.emit("QUEUED", message_id=env.message_id, domain=recipient.domain)
        self.store.put_message(env.sender, env, sent_copy=True)
        self.emit(
            "SEND_ACCEPTED",
            message_id=env.message_id,
            sender=str(env.sender),
            local=delivered_local,
            queued=queued,
        )
        return RpcResponse.ok(
            {"message_id": env.message_id, "queued": queued, "delivered_local": delivered_local}
        )

    def _deliver_local(
        self, env: Envelope, recipient: Address, delivered: list[str]
    ) -> None:
        environment = PluginEnvironment(
            principal=str(env.sender), store=self.store, server=self, recipient=recipient
        )
        verdict = self.registry.dispatch_delivery(env, environment)
        if verdict == HANDLED:
            self.emit("PUSHED", message_id=env.message_id, recipient=str(recipient))
        else:
            self.store.put_message(recipient, env, received_at=self.clock.now_ms())
            self.emit("STORED", message_id=env.message_id, recipient=str(recipient))
        delivered.append(str(recipient))

    # ------------------------------------------------------------ deliver

    def handle_deliver(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        auth = request.auth or {}
        if auth.get("kind") != "server":
            raise AuthFailed("DELIVER requires peer server authentication")
        peer = self._authenticate(request, chunks)
        env = env_mod.parse(canonical.encode(request.payload))
        if not valid_origin_signature(env, self.trust):
            raise BadOriginSignature()
        if self.discard_inbound:
            self.emit("DISCARDED", message_id=env.message_id, peer=peer)
            return RpcResponse.ok({"message_id": env.message_id, "discarded": True})
        locals_ = [r for r in env.to if r.domain == self.name]
        if not locals_ or any(self.trust.user(r) is None for r in locals_):
            raise UnknownRecipient()
        delivered: list[str] = []
        for recipient in locals_:
            self._deliver_local(env, recipient, delivered)
        self.emit("DELIVERED_REMOTE", message_id=env.message_id, peer=peer, recipients=delivered)
        return RpcResponse.ok({"message_id": env.message_id, "delivered": delivered})

    # ------------------------------------------------------- mailbox verbs

    def _mailbox_owner(self, request: RpcRequest, chunks: list[bytes]) -> Address:
        principal = self._authenticate(request, chunks)
        if principal is None or "@" not in principal:
            raise AuthFailed("mailbox verbs require a user principal")
        return Address.parse(principal)

    def handle_list(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        owner = self._mailbox_owner(request, chunks)
        return RpcResponse.ok({"headers": self.store.list_headers(owner)})

    def handle_retrieve(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        owner = self._mailbox_owner(request, chunks)
        message_id = (request.payload or {}).get("message_id", "")
        env = self.store.get_message(owner, message_id)  # NOT_FOUND if absent/foreign
        return RpcResponse.ok({"envelope": canonical.decode(env_mod.render(env))})

    def handle_delete(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        owner = self._mailbox_owner(request, chunks)
        message_id = (request.payload or {}).get("message_id", "")
        self.store.delete_message(owner, message_id)
        return RpcResponse.ok({"deleted": message_id})

    # -------------------------------------------------------------- token

    def handle_token_request(self, request: RpcRequest, chunks: list[bytes]) -> RpcResponse:
        principal = self._authenticate(request, chunks)
        if principal is None or "@" not in principal:
            raise AuthFailed("token request requires a user principal")
        audience = (request.payload or {}).get("audience", "")
        if not audience:
            raise AuthFailed("audience required")
        # the issuer does not gate audiences; the verifier enforces them
        token = issue_federated_token(
            self.name,
            self.key,
            Address.parse(principal),
            audience,
            self.trust,
            now=self.clock.now_ms(),
        )
        self.emit("TOKEN_ISSUED", subject=principal, audience=audience, token_id=token.token_id)
        return RpcResponse.ok({"token": token.to_wire()})

    # ---------------------------------------------------------- extension

    def handle_extension(
        self, request: RpcRequest, chunks: list[bytes]
    ) -> tuple[RpcResponse, list[bytes]]:
        principal = self._authenticate(request, chunks)
        if request.extension_id and request.extension_id.startswith("admin.plugins."):
            return self._handle_admin(request.extension_id, request.payload, principal), []
        environment = PluginEnvironment(
            principal=principal,
            store=self.store,
            server=self,
            request_payload=request.payload,
            request_chunks=chunks,
        )
        payload, out_chunks = self.registry.dispatch_extension(
            request.extension_id, request.payload, environment
        )
        return RpcResponse.ok(payload), out_chunks

    def _handle_admin(self, extension_id: str, payload, principal) -> RpcResponse:
        if principal not in self.admins:
            raise PermissionDenied("admin extension requires an admin principal")
        action = extension_id.removeprefix("admin.plugins.")
        if action == "list":
            return RpcResponse.ok(
                {
                    "plugins": [
                        {
                            "name": r.name,
                            "kinds": sorted(r.kinds),
                            "extension_id": r.extension_id,
                            "priority": r.queue_priority,
                            "enabled": r.enabled,
                        }
                        for r in self.registry.registrations()
                    ]
                }
            )
        if action == "set_priority":
            self.registry.set_priority(payload["name"], int(payload["priority"]))
            return RpcResponse.ok({"ok": True})
        if action == "set_enabled":
            self.registry.set_enabled(payload["name"], bool(payload["enabled"]))
            return RpcResponse.ok({"ok": True})
        if action == "unregister":
            self.registry.unregister(payload["name"])
            return RpcResponse.ok({"ok": True})
        raise NotFound(f"unknown admin action {action}")

    # --------------------------------------------------------------- queue

    def _drain_queue(self) -> None:
        while not self._queue_stop.is_set():
            try:
                entries = self.store.due_entries(self.clock.now_ms())
            except Exception:
                entries = []
            if not entries:
                time.sleep(0.02)
                continue
            for entry in entries:
                if self._queue_stop.is_set():
                    return
                self._relay(entry)

    def _relay(self, entry) -> None:
        payload = canonical.decode(env_mod.render(entry.envelope))
        request = RpcRequest(verb=DELIVER, payload=payload)
        chain = self.trust.server_certs.get(self.name)
        if chain is not None:
            request = RpcRequest(
                verb=DELIVER,
                payload=payload,
                auth=make_server_auth(request, [], self.name, chain, self.key),
            )
        try:
            response, _ = call_domain(
                entry.next_hop, self.routes, request, deadline=10.0, rng=self._rng
            )
            ok = response.status == "OK"
        except WsmailError:
            ok = False
        if ok:
            self.store.mark_delivered(entry.id)
            self.emit(
                "RELAYED", message_id=entry.envelope.message_id, domain=entry.next_hop
            )
        else:
            dead = self.store.mark_failed(
                entry.id, self.clock.now_ms(), self.max_attempts
            )
            if dead:
                self.emit(
                    "DEAD_LETTER",
                    message_id=entry.envelope.message_id,
                    domain=entry.next_hop,
                )


# ----------------------------------------------------------------- startup


def load_key(path: str | Path) -> SigningKey:
    return SigningKey.from_bytes(canonical.unb64(Path(path).read_text().strip()))


def save_key(key: SigningKey, path: str | Path) -> None:
    Path(path).write_text(canonical.b64(key.to_bytes()))


def server_from_config(config: ServerConfig, clock: Clock = SYSTEM_CLOCK) -> MtaServer:
    trust = load_trust(config.trust_path) if config.trust_path else TrustStore()
    routes_path = os.environ.get("WSMAIL_ROUTES", config.routes_path)
    routes = load_routes(routes_path) if routes_path else []
    key = load_key(config.key_path) if config.key_path else SigningKey.generate()
    plugin_config = None
    if config.plugin_config_path:
        plugin_config = json.loads(Path(config.plugin_config_path).read_text())
    return MtaServer(
        name=config.name,
        key=key,
        trust=trust,
        routes=routes,
        data_dir=config.data_dir,
        listen=config.listen,
        clock=clock,
        frame_limit=config.frame_limit,
        max_attempts=config.max_attempts,
        admins=config.admins,
        discard_inbound=config.discard_inbound,
        plugin_config=plugin_config,
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="wsmaild", description="messaging server daemon")
    parser.add_argument("--config", required=True, help="server config file (JSON)")
    parser.add_argument("--routes", help="route table override")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    config = ServerConfig.from_file(args.config)
    if args.routes:
        config.routes_path = args.routes
    server = server_from_config(config).start()
    host, port = server.endpoint
    log.info('{"event": "LISTENING", "server": "%s", "endpoint": "%s:%d"}', server.name, host, port)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
