"""Client agent: composes and signs outgoing mail, reads the mailbox,
fetches on-demand attachments, receives instant-message pushes, and
exposes a loopback HTTP+JSON API for local user interfaces.

The agent never sends an unsigned envelope: every composed message
carries an author signature before it leaves the process.
"""

from __future__ import annotations

import argparse
import getpass
import json
import queue
import random
import sys
import threading
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

from . import canonical, envelope as env_mod
from .clockutil import Clock, SYSTEM_CLOCK
from .envelope import (
    AUTHOR,
    Address,
    AttachmentTicket,
    BodyPart,
    Envelope,
    FORM_HEADER,
    INSTANT,
    new_id,
)
from .errors import FetchFailed, NoRoute, WsmailError
from .forms import RoutedForm, attach_form, form_from_envelope, resolve_approver, sign_off
from .im import (
    PARTYLINE_EXTENSION_ID,
    PRESENCE_EXTENSION_ID,
    PartyLineClient,
    PartyLineInvite,
    decline_party_line,
    join_party_line,
)
from .keys import SigningKey
from .ondemand import (
    ATTACHMENT_CONTENT_TYPE,
    DECLARED_HEADER,
    FETCH_EXTENSION_ID,
    declare_attachment,
    verify_fetched_blob,
)
from .packages import ClientPluginRegistry, FormPackage, PluginManifest
from .transport import (
    EXTENSION as EXTENSION_VERB,
    DELETE,
    IM_PUSH,
    LIST,
    RETRIEVE,
    RouteRecord,
    RpcRequest,
    RpcResponse,
    RpcServer,
    SEND,
    TOKEN_REQUEST,
    call,
    call_domain,
    load_routes,
)
from .trust import CertChain, FederatedToken, TrustStore

DEFAULT_POLL_INTERVAL_S = 2.0


class ClientAgent:
    def __init__(
        self,
        address: Address,
        key: SigningKey,
        password: str,
        routes: list[RouteRecord],
        trust: TrustStore | None = None,
        chain: CertChain | None = None,
        home_endpoint: tuple[str, int] | None = None,
        data_dir: str | Path | None = None,
        clock: Clock = SYSTEM_CLOCK,
        rng: random.Random | None = None,
    ):
        self.address = address
        self.key = key
        self.password = password
        self.routes = routes
        self.trust = trust or TrustStore()
        self.chain = chain
        self.home_endpoint = home_endpoint
        self.clock = clock
        self._rng = rng or random.Random()
        self.plugins: ClientPluginRegistry | None = None
        if data_dir is not None:
            self.plugins = ClientPluginRegistry(Path(data_dir) / "plugins.json")
        self._listener: RpcServer | None = None
        self._im_messages: list[dict] = []
        self._im_invites: list[dict] = []
        self._im_lock = threading.Lock()
        self._im_subscribers: list[queue.Queue] = []
        self._partyline_clients: dict[str, PartyLineClient] = {}
        self._partyline_log: dict[str, list[dict]] = {}

    # --------------------------------------------------------------- rpc

    def _auth(self) -> dict:
        return {
            "kind": "password",
            "address": str(self.address),
            "password": self.password,
        }

    def _call(
        self,
        verb: str,
        payload: canonical.Value = None,
        chunks: list[bytes] | None = None,
        extension_id: str | None = None,
        domain: str | None = None,
        authenticated: bool = True,
    ) -> tuple[RpcResponse, list[bytes]]:
        request = RpcRequest(
            verb=verb,
            payload=payload,
            extension_id=extension_id,
            auth=self._auth() if authenticated else None,
        )
        target = domain or self.address.domain
        if domain is None and self.home_endpoint is not None:
            response, out = call(self.home_endpoint, request, chunks or [])
        else:
            response, out = call_domain(
                target, self.routes, request, chunks or [], rng=self._rng
            )
        if response.status != "OK":
            raise WsmailError(
                f"{verb} failed: {response.error_code}",
                code=response.error_code or "ERROR",
            )
        return response, out

    # ------------------------------------------------------------ compose

    def compose(
        self,
        to: list[Address],
        subject: str,
        body: bytes,
        instant: bool = False,
        attachments: list[tuple[str, bytes]] | None = None,
        form: RoutedForm | None = None,
        content_type: str = "text/plain",
    ) -> Envelope:
        parts = [BodyPart(content_type=content_type, data=body)]
        headers: list[tuple[str, canonical.Value]] = []
        declared = []
        for description, blob in attachments or ():
            declared.append(declare_attachment(description, blob))
            parts.append(BodyPart(content_type=ATTACHMENT_CONTENT_TYPE, data=blob))
        if declared:
            headers.append((DECLARED_HEADER, declared))
        env = Envelope(
            message_id=new_id(),
            sender=self.address,
            to=tuple(to),
            subject=subject,
            sent_at=self.clock.now_ms(),
            body=tuple(parts),
            flags=frozenset({INSTANT}) if instant else frozenset(),
            headers=tuple(headers),
        )
        if form is not None:
            env = attach_form(env, form)
        return env_mod.sign(
            env, self.key, str(self.address), AUTHOR, signed_at=self.clock.now_ms()
        )

    def send(
        self,
        to: list[Address],
        subject: str,
        body: bytes,
        instant: bool = False,
        attachments: list[tuple[str, bytes]] | None = None,
        form: RoutedForm | None = None,
    ) -> dict:
        env = self.compose(to, subject, body, instant, attachments, form)
        return self.send_envelope(env)

    def send_envelope(self, env: Envelope) -> dict:
        """A receipt means the home server queued the message, nothing more."""
        response, _ = self._call(SEND, canonical.decode(env_mod.render(env)))
        return response.payload

    # ------------------------------------------------------------ mailbox

    def inbox(self) -> list[dict]:
        response, _ = self._call(LIST, {})
        return response.payload["headers"]

    def retrieve(self, message_id: str) -> Envelope:
        response, _ = self._call(RETRIEVE, {"message_id": message_id})
        return env_mod.parse(canonical.encode(response.payload["envelope"]))

    def delete(self, message_id: str) -> None:
        self._call(DELETE, {"message_id": message_id})

    # ----------------------------------------------------------- fetching

    def request_token(self, audience: str) -> dict:
        response, _ = self._call(TOKEN_REQUEST, {"audience": audience})
        return response.payload["token"]

    def fetch_attachment(self, ticket: AttachmentTicket) -> bytes:
        """Token from the home server, blob from the origin server; the
        digest is verified before the bytes are surfaced."""
        token = self.request_token(ticket.origin_server)
        response, chunks = self._call(
            EXTENSION_VERB,
            {"guid": ticket.guid, "token": token},
            extension_id=FETCH_EXTENSION_ID,
            domain=ticket.origin_server,
            authenticated=False,
        )
        if not chunks:
            raise FetchFailed("origin returned no attachment data")
        blob = b"".join(chunks)
        verify_fetched_blob(ticket, blob)
        return blob

    # --------------------------------------------------------- client plug-ins

    def open_form_package(
        self,
        manifest: PluginManifest,
        fetch: Callable[[str], bytes],
        approve: Callable[[PluginManifest], bool],
    ) -> FormPackage:
        if self.plugins is None:
            raise WsmailError("agent has no plug-in registry", code="UNKNOWN_PLUGIN")
        return self.plugins.acquire(manifest, fetch, approve, self.trust)

    def install_plugin(
        self,
        manifest_wire: dict,
        approved: bool,
        artifact: bytes | None = None,
    ) -> dict:
        """Install a form package on an explicit user decision. The
        artifact may be supplied inline (it is still hash- and
        signature-checked against the manifest) or fetched from the
        manifest URL."""
        manifest = PluginManifest.from_wire(manifest_wire)
        if artifact is not None:
            fetch = lambda url: artifact
        else:
            fetch = lambda url: urllib.request.urlopen(url, timeout=10).read()
        package = self.open_form_package(manifest, fetch, lambda m: approved)
        return {
            "name": manifest.name,
            "version": manifest.version,
            "form_type": package.form_type,
        }

    # -------------------------------------------------------------- forms

    def form_view(self, message_id: str) -> dict:
        """Everything a UI needs to render a routed form: the wire form,
        whose turn it is, and (if the package is installed) computed
        field values and layout hints."""
        env = self.retrieve(message_id)
        form = form_from_envelope(env)
        next_approver = None
        if not form.complete:
            next_approver = resolve_approver(
                form.route[form.next_step_index].approver, None
            )
        view = {
            "message_id": message_id,
            "form": form.to_wire(),
            "complete": form.complete,
            "next_approver": next_approver,
            "my_turn": next_approver == str(self.address),
            "computed": {},
            "layout": [],
        }
        if form.manifest is not None and self.plugins is not None:
            package = self.plugins.installed_package(
                form.manifest.name, form.manifest.version
            )
            if package is not None:
                view["computed"] = package.evaluate_computed(form.payload)
                view["layout"] = list(package.layout)
        return view

    def sign_off_form(self, message_id: str) -> dict:
        """Approve the current route step of a received form and forward
        the signed form to the next approver (or back to the originator
        when the route is complete)."""
        env = self.retrieve(message_id)
        form = form_from_envelope(env)
        signed = sign_off(
            form, self.key, str(self.address), signed_at=self.clock.now_ms()
        )
        if signed.complete:
            dest = str(env.sender)
        else:
            dest = resolve_approver(
                signed.route[signed.next_step_index].approver, None
            )
            if dest is None:
                raise WsmailError(
                    "next route step has no resolvable approver",
                    code="NOT_YOUR_TURN",
                )
        body = env.body[0].data if env.body else b""
        content_type = env.body[0].content_type if env.body else "text/plain"
        out = self.compose(
            to=[Address.parse(dest)],
            subject=env.subject,
            body=body,
            form=signed,
            content_type=content_type,
        )
        receipt = self.send_envelope(out)
        # the form moves along the route; drop the now-stale mailbox copy
        self.delete(message_id)
        return {"form": signed.to_wire(), "forwarded_to": dest, "receipt": receipt}

    # ------------------------------------------------------------- instant

    def start_listener(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Start the push listener and register presence with the home
        server. Pushed messages are not persisted server-side; they exist
        only in this process until the user acts on them."""
        if self._listener is not None:
            return self._listener.endpoint
        self._listener = RpcServer(host, port, self._handle_push).start()
        endpoint = self._listener.endpoint
        self._call(
            EXTENSION_VERB,
            {"user": str(self.address), "host": endpoint[0], "port": endpoint[1]},
            extension_id=PRESENCE_EXTENSION_ID,
        )
        return endpoint

    def stop_listener(self) -> None:
        if self._listener is not None:
            self._listener.stop()
            self._listener = None
        for client in self._partyline_clients.values():
            client.close()
        self._partyline_clients.clear()

    def _handle_push(self, request: RpcRequest, chunks, endpoint):
        if request.verb != IM_PUSH:
            return RpcResponse.error("MALFORMED_FRAME"), []
        payload = request.payload or {}
        if isinstance(payload, dict) and "partyline_invite" in payload:
            event = {"kind": "invite", "invite": payload["partyline_invite"]}
            with self._im_lock:
                self._im_invites.append(payload["partyline_invite"])
        else:
            env = env_mod.parse(canonical.encode(payload))
            event = {
                "kind": "message",
                "envelope": canonical.decode(env_mod.render(env)),
            }
            with self._im_lock:
                self._im_messages.append(event["envelope"])
        self._notify(event)
        return RpcResponse.ok({"accepted": True}), []

    def _notify(self, event: dict) -> None:
        with self._im_lock:
            subscribers = list(self._im_subscribers)
        for q in subscribers:
            q.put(event)

    def subscribe_events(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._im_lock:
            self._im_subscribers.append(q)
        return q

    def unsubscribe_events(self, q: queue.Queue) -> None:
        with self._im_lock:
            if q in self._im_subscribers:
                self._im_subscribers.remove(q)

    def pending_instant(self) -> tuple[list[dict], list[dict]]:
        with self._im_lock:
            return list(self._im_messages), list(self._im_invites)

    # ----------------------------------------------------------- party line

    def start_party_line(self, participants: list[str]) -> dict:
        response, _ = self._call(
            EXTENSION_VERB,
            {"participants": participants},
            extension_id=PARTYLINE_EXTENSION_ID,
        )
        return response.payload

    def join_party_line(self, invite_wire: dict) -> str:
        invite = PartyLineInvite.from_wire(invite_wire)
        client = join_party_line(invite, str(self.address), self.chain, self.key)
        self._partyline_clients[invite.channel_id] = client
        self._partyline_log.setdefault(invite.channel_id, [])
        thread = threading.Thread(
            target=self._pump_party_line, args=(invite.channel_id, client), daemon=True
        )
        thread.start()
        return invite.channel_id

    def decline_party_line(self, invite_wire: dict) -> None:
        decline_party_line(PartyLineInvite.from_wire(invite_wire))

    def _pump_party_line(self, channel_id: str, client: PartyLineClient) -> None:
        while True:
            try:
                sender, text = client.recv()
            except (WsmailError, OSError):
                return
            entry = {"channel_id": channel_id, "from": sender, "text": text}
            with self._im_lock:
                self._partyline_log[channel_id].append(entry)
            self._notify({"kind": "partyline", **entry})

    def say_party_line(self, channel_id: str, text: str) -> None:
        client = self._partyline_clients.get(channel_id)
        if client is None:
            raise WsmailError("not joined to that channel", code="NOT_FOUND")
        client.send(text)

    def party_line_log(self, channel_id: str) -> list[dict]:
        with self._im_lock:
            return list(self._partyline_log.get(channel_id, ()))


# ----------------------------------------------------------- local HTTP API


class LocalApiServer:
    """Loopback HTTP+JSON API for user interfaces (documented in
    docs/local-api.md). Binds to 127.0.0.1 only."""

    def __init__(self, agent: ClientAgent, host: str = "127.0.0.1", port: int = 0):
        self.agent = agent
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # silence default stderr noise
                pass

            def _json(self, status: int, doc) -> None:
                body = json.dumps(doc).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _read_body(self) -> dict:
                length = int(self.headers.get("Content-Length", "0"))
                if length == 0:
                    return {}
                return json.loads(self.rfile.read(length).decode("utf-8"))

            def _dispatch(self, method: str) -> None:
                try:
                    outer._route(self, method)
                except WsmailError as exc:
                    self._json(400, {"error": exc.code, "detail": str(exc)})
                except Exception as exc:  # surfaced, never swallowed
                    self._json(500, {"error": "INTERNAL", "detail": str(exc)})

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return (host, port)

    def start(self) -> "LocalApiServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=2)

    # ------------------------------------------------------------ routing

    def _route(self, handler, method: str) -> None:
        agent = self.agent
        path = handler.path.split("?", 1)[0]
        parts = [p for p in path.split("/") if p]
        if method == "GET" and path == "/api/whoami":
            handler._json(200, {"address": str(agent.address)})
            return
        if method == "GET" and path == "/api/inbox":
            handler._json(200, {"headers": agent.inbox()})
            return
        if parts[:2] == ["api", "messages"] and len(parts) == 3:
            message_id = parts[2]
            if method == "GET":
                env = agent.retrieve(message_id)
                handler._json(
                    200, {"envelope": canonical.decode(env_mod.render(env))}
                )
                return
            if method == "DELETE":
                agent.delete(message_id)
                handler._json(200, {"deleted": message_id})
                return
        if method == "POST" and path == "/api/send":
            doc = handler._read_body()
            receipt = agent.send(
                to=[Address.parse(a) for a in doc["to"]],
                subject=doc.get("subject", ""),
                body=doc.get("body", "").encode("utf-8"),
                instant=bool(doc.get("instant", False)),
                attachments=[
                    (a["description"], canonical.unb64(a["data"]))
                    for a in doc.get("attachments", ())
                ],
            )
            handler._json(200, {"receipt": receipt})
            return
        if method == "GET" and path == "/api/im/pending":
            messages, invites = agent.pending_instant()
            handler._json(200, {"messages": messages, "invites": invites})
            return
        if method == "GET" and path == "/api/im/stream":
            self._stream(handler)
            return
        if method == "POST" and path == "/api/partyline/join":
            doc = handler._read_body()
            channel_id = agent.join_party_line(doc["invite"])
            handler._json(200, {"channel_id": channel_id})
            return
        if method == "POST" and path == "/api/partyline/decline":
            agent.decline_party_line(handler._read_body()["invite"])
            handler._json(200, {"declined": True})
            return
        if method == "POST" and path == "/api/partyline/start":
            doc = handler._read_body()
            handler._json(200, agent.start_party_line(doc.get("participants", [])))
            return
        if method == "POST" and path == "/api/partyline/say":
            doc = handler._read_body()
            agent.say_party_line(doc["channel_id"], doc["text"])
            handler._json(200, {"ok": True})
            return
        if parts[:2] == ["api", "partyline"] and len(parts) == 4 and parts[3] == "log":
            handler._json(200, {"messages": agent.party_line_log(parts[2])})
            return
        if method == "POST" and path == "/api/forms/signoff":
            doc = handler._read_body()
            handler._json(200, agent.sign_off_form(doc["message_id"]))
            return
        if method == "GET" and parts[:2] == ["api", "forms"] and len(parts) == 3:
            handler._json(200, agent.form_view(parts[2]))
            return
        if method == "POST" and path == "/api/plugins/install":
            doc = handler._read_body()
            artifact = (
                canonical.unb64(doc["artifact"]) if doc.get("artifact") else None
            )
            handler._json(
                200,
                {
                    "installed": agent.install_plugin(
                        doc["manifest"], bool(doc.get("approved", False)), artifact
                    )
                },
            )
            return
        if method == "GET" and path == "/api/plugins":
            installed = []
            if agent.plugins is not None:
                installed = agent.plugins.list_installed()
            handler._json(200, {"plugins": installed})
            return
        if method == "POST" and path == "/api/fetch":
            doc = handler._read_body()
            ticket = AttachmentTicket.from_wire(doc["ticket"])
            blob = agent.fetch_attachment(ticket)
            handler._json(200, {"data": canonical.b64(blob), "size": len(blob)})
            return
        handler._json(404, {"error": "NOT_FOUND", "detail": path})

    def _stream(self, handler) -> None:
        """Server-sent events: one `data:` line of JSON per push event."""
        q = self.agent.subscribe_events()
        try:
            handler.send_response(200)
            handler.send_header("Content-Type", "text/event-stream")
            handler.send_header("Cache-Control", "no-cache")
            handler.end_headers()
            # replay anything that arrived before this subscriber connected
            messages, invites = self.agent.pending_instant()
            for env in messages:
                self._write_event(handler, {"kind": "message", "envelope": env})
            for invite in invites:
                self._write_event(handler, {"kind": "invite", "invite": invite})
            while True:
                try:
                    event = q.get(timeout=15.0)
                except queue.Empty:
                    handler.wfile.write(b": keepalive\n\n")
                    handler.wfile.flush()
                    continue
                self._write_event(handler, event)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.agent.unsubscribe_events(q)

    @staticmethod
    def _write_event(handler, event: dict) -> None:
        data = json.dumps(event)
        handler.wfile.write(f"event: {event['kind']}\ndata: {data}\n\n".encode("utf-8"))
        handler.wfile.flush()


# ------------------------------------------------------------------- CLI


def _agent_from_args(args) -> ClientAgent:
    address = Address.parse(args.user)
    routes = load_routes(args.routes) if args.routes else []
    endpoint = None
    if args.server:
        host, _, port = args.server.partition(":")
        endpoint = (host, int(port))
    if not routes and endpoint is None:
        raise NoRoute("provide --server host:port or --routes <table>")
    key_path = Path(args.key) if args.key else None
    if key_path and key_path.exists():
        key = SigningKey.from_bytes(canonical.unb64(key_path.read_text().strip()))
    else:
        key = SigningKey.generate()
        if key_path:
            key_path.write_text(canonical.b64(key.to_bytes()))
    password = args.password if args.password is not None else getpass.getpass()
    return ClientAgent(
        address=address,
        key=key,
        password=password,
        routes=routes,
        home_endpoint=endpoint,
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="wsmail", description="messaging client")
    parser.add_argument("--user", required=True, help="your address (name@domain)")
    parser.add_argument("--server", help="home server host:port (overrides routes)")
    parser.add_argument("--routes", help="route table file")
    parser.add_argument("--key", help="signing key file (created if absent)")
    parser.add_argument("--password", help="password (prompted if omitted)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_send = sub.add_parser("send", help="compose and send a message")
    p_send.add_argument("--to", required=True, action="append")
    p_send.add_argument("--subject", default="")
    p_send.add_argument("--body", default="")
    p_send.add_argument("--instant", action="store_true")
    p_send.add_argument("--attach", action="append", metavar="FILE", default=[])

    sub.add_parser("list", help="list inbox headers")

    p_get = sub.add_parser("get", help="retrieve one message")
    p_get.add_argument("message_id")

    p_rm = sub.add_parser("rm", help="delete one message")
    p_rm.add_argument("message_id")

    p_api = sub.add_parser("serve", help="run the local HTTP API")
    p_api.add_argument("--port", type=int, default=8178)
    p_api.add_argument("--listen", action="store_true", help="register for pushes")

    p_fetch = sub.add_parser("fetch", help="fetch an on-demand attachment")
    p_fetch.add_argument("message_id")
    p_fetch.add_argument("--index", type=int, default=0)
    p_fetch.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    agent = _agent_from_args(args)

    if args.command == "send":
        attachments = [
            (Path(f).name, Path(f).read_bytes()) for f in args.attach
        ]
        receipt = agent.send(
            to=[Address.parse(a) for a in args.to],
            subject=args.subject,
            body=args.body.encode("utf-8"),
            instant=args.instant,
            attachments=attachments,
        )
        print(json.dumps(receipt))
        return 0
    if args.command == "list":
        for header in agent.inbox():
            print(json.dumps(header))
        return 0
    if args.command == "get":
        env = agent.retrieve(args.message_id)
        print(env_mod.render(env).decode("utf-8"))
        return 0
    if args.command == "rm":
        agent.delete(args.message_id)
        print(json.dumps({"deleted": args.message_id}))
        return 0
    if args.command == "fetch":
        env = agent.retrieve(args.message_id)
        ticket = env.attachments[args.index]
        blob = agent.fetch_attachment(ticket)
        Path(args.out).write_bytes(blob)
        print(json.dumps({"guid": ticket.guid, "size": len(blob), "out": args.out}))
        return 0
    if args.command == "serve":
        if args.listen:
            agent.start_listener()
        api = LocalApiServer(agent, port=args.port).start()
        host, port = api.endpoint
        print(json.dumps({"api": f"http://{host}:{port}"}))
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            api.stop()
            agent.stop_listener()
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
