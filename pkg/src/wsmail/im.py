"""Instant messaging: presence, direct push, and party-line channels.

Presence is an extension plug-in ("im.presence"): clients register
their push endpoint with a TTL and keep it alive by re-registering.
INSTANT-flagged envelopes are pushed to present recipients with the
IM_PUSH verb (the client acts as a server for that call); if the
recipient is absent or the push fails, the delivery plug-in passes the
message back for normal inbox storage.

A party line is a brokered synchronous channel: the broker allocates a
TCP port, invites the participants, and only lets clients in after a
mutual certificate handshake (chains to shared anchors on both sides).
Frame format: docs/partyline.md.
"""

from __future__ import annotations

import secrets
import socket
import threading
from dataclasses import dataclass, replace
from typing import Callable, Optional

from . import canonical
from .clockutil import now_ms
from .envelope import INSTANT, Address, Envelope, new_id, render
from .errors import (
    AuthFailed,
    ChannelExpired,
    Declined,
    NoClientCert,
    WsmailError,
)
from .keys import SigningKey
from .plugins import HANDLED, PASS, PluginEnvironment, ServerPlugin
from .transport import IM_PUSH, RpcRequest, call, read_message, write_message
from .trust import CertChain, TrustStore

PRESENCE_EXTENSION_ID = "im.presence"
PARTYLINE_EXTENSION_ID = "im.partyline"
DEFAULT_PRESENCE_TTL_MS = 120_000
DEFAULT_CHANNEL_TTL_MS = 600_000


@dataclass(frozen=True)
class PresenceEntry:
    endpoint: tuple[str, int]
    registered_at: int
    ttl_ms: int

    def live(self, now: int) -> bool:
        return now < self.registered_at + self.ttl_ms


class PresenceTable:
    """Concurrent register/lookup; expired entries are never returned."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[str, PresenceEntry] = {}

    def register(self, user: str, endpoint: tuple[str, int], now: int, ttl_ms: int) -> None:
        with self._lock:
            self._entries[user] = PresenceEntry(endpoint, now, ttl_ms)

    def lookup(self, user: str, now: int) -> Optional[PresenceEntry]:
        with self._lock:
            entry = self._entries.get(user)
            if entry is None or not entry.live(now):
                return None
            return entry

    def unregister(self, user: str) -> None:
        with self._lock:
            self._entries.pop(user, None)


class PresencePlugin(ServerPlugin):
    """EXTENSION "im.presence": authenticated location registration."""

    def __init__(self, table: PresenceTable, now: Callable[[], int]):
        self._table = table
        self._now = now

    def on_extension(self, payload, environment: PluginEnvironment):
        user = payload.get("user") if isinstance(payload, dict) else None
        if not user or environment.principal != user:
            raise AuthFailed("presence registration must match the caller")
        ttl = int(payload.get("ttl_ms", DEFAULT_PRESENCE_TTL_MS))
        self._table.register(user, (payload["host"], int(payload["port"])), self._now(), ttl)
        return {"registered": user, "ttl_ms": ttl}, []


class InstantDeliveryPlugin(ServerPlugin):
    """DELIVERY processor: push INSTANT envelopes to present recipients."""

    def __init__(
        self,
        table: PresenceTable,
        now: Callable[[], int],
        push_deadline: float = 5.0,
    ):
        self._table = table
        self._now = now
        self._deadline = push_deadline

    def on_delivery(self, env: Envelope, environment: PluginEnvironment) -> str:
        if INSTANT not in env.flags or environment.recipient is None:
            return PASS
        entry = self._table.lookup(str(environment.recipient), self._now())
        if entry is None:
            return PASS
        try:
            response, _ = call(
                entry.endpoint,
                RpcRequest(verb=IM_PUSH, payload=canonical.decode(render(env))),
                deadline=self._deadline,
            )
        except WsmailError:
            return PASS  # offline semantics: fall through to the inbox
        return HANDLED if response.status == "OK" else PASS


# ------------------------------------------------------------- party line


@dataclass(frozen=True)
class PartyLineInvite:
    channel_id: str
    broker: tuple[str, int]
    participants: frozenset[str]
    initiated_by: str
    expires_at: int

    def __post_init__(self):
        if self.initiated_by not in self.participants:
            raise ValueError("initiator must be a participant")

    def to_wire(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "broker": [self.broker[0], self.broker[1]],
            "participants": sorted(self.participants),
            "initiated_by": self.initiated_by,
            "expires_at": self.expires_at,
        }

    @classmethod
    def from_wire(cls, w: dict) -> "PartyLineInvite":
        return cls(
            channel_id=w["channel_id"],
            broker=(w["broker"][0], int(w["broker"][1])),
            participants=frozenset(w["participants"]),
            initiated_by=w["initiated_by"],
            expires_at=w["expires_at"],
        )


def _join_payload(channel_id: str, challenge_b64: str) -> bytes:
    return canonical.encode(
        {"partyline_join": {"channel_id": channel_id, "challenge": challenge_b64}}
    )


class PartyLineChannel:
    """Broker-hosted fan-out loop for one channel."""

    def __init__(
        self,
        invite: PartyLineInvite,
        trust: TrustStore,
        now: Callable[[], int],
        sock: socket.socket,
    ):
        self.invite = invite
        self._trust = trust
        self._now = now
        self._sock = sock
        self._lock = threading.Lock()
        self._members: dict[socket.socket, str] = {}
        self._stopping = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def _accept_loop(self) -> None:
        try:
            self._sock.settimeout(0.2)
        except OSError:  # closed before the loop started
            return
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handshake, args=(conn,), daemon=True).start()

    def _handshake(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(10.0)
            challenge = canonical.b64(secrets.token_bytes(32))
            write_message(
                conn,
                {"challenge": challenge, "channel_id": self.invite.channel_id, "chunks": 0},
                [],
            )
            header, _, _ = read_message(conn)
            join = header.get("join") if isinstance(header, dict) else None
            if self._now() >= self.invite.expires_at:
                self._reject(conn, "CHANNEL_EXPIRED")
                return
            if not join or not join.get("chain"):
                self._reject(conn, "NO_CLIENT_CERT")
                return
            try:
                chain = CertChain.from_wire(join["chain"])
                signature = canonical.unb64(join["signature"])
            except (KeyError, ValueError):
                self._reject(conn, "NO_CLIENT_CERT")
                return
            name = chain.leaf.name
            if (
                name not in self.invite.participants
                or not self._trust.chain_valid(chain)
                or not chain.leaf.key.verify(
                    signature, _join_payload(self.invite.channel_id, challenge)
                )
            ):
                self._reject(conn, "NO_CLIENT_CERT")
                return
            write_message(conn, {"joined": name, "chunks": 0}, [])
            with self._lock:
                self._members[conn] = name
            self._pump(conn, name)
        except (WsmailError, OSError):
            conn.close()

    @staticmethod
    def _reject(conn: socket.socket, code: str) -> None:
        try:
            write_message(conn, {"error": code, "chunks": 0}, [])
        finally:
            conn.close()

    def _pump(self, conn: socket.socket, name: str) -> None:
        try:
            while not self._stopping.is_set():
                header, _, _ = read_message(conn)
                text = header.get("msg") if isinstance(header, dict) else None
                if text is None:
                    break
                self._fan_out(name, text, exclude=conn)
        except (WsmailError, OSError):
            pass
        finally:
            with self._lock:
                self._members.pop(conn, None)
            conn.close()

    def _fan_out(self, sender: str, text: str, exclude: socket.socket) -> None:
        # single lock serializes fan-out, preserving arrival order per sender
        with self._lock:
            members = [(s, n) for s, n in self._members.items() if s is not exclude]
            for sock, _name in members:
                try:
                    write_message(sock, {"from": sender, "msg": text, "chunks": 0}, [])
                except (WsmailError, OSError):
                    pass

    def member_names(self) -> list[str]:
        with self._lock:
            return sorted(self._members.values())

    def close(self) -> None:
        self._stopping.set()
        with self._lock:
            members = list(self._members)
            self._members.clear()
        for conn in members:
            conn.close()
        try:
            self._sock.close()
        except OSError:
            pass


class PartyLinePlugin(ServerPlugin):
    """EXTENSION "im.partyline": brokers channel creation.

    Payload: {"participants": [...], "ttl_ms"?}. The broker allocates a
    port, starts the channel, and pushes the invite to every present
    participant other than the initiator.
    """

    def __init__(
        self,
        table: PresenceTable,
        trust: TrustStore,
        now: Callable[[], int],
        bind_host: str = "127.0.0.1",
        channel_ttl_ms: int = DEFAULT_CHANNEL_TTL_MS,
    ):
        self._table = table
        self._trust = trust
        self._now = now
        self._bind_host = bind_host
        self._ttl = channel_ttl_ms
        self._channels: dict[str, PartyLineChannel] = {}
        self._lock = threading.Lock()

    def on_extension(self, payload, environment: PluginEnvironment):
        initiator = environment.principal
        participants = frozenset(payload.get("participants", ())) | {initiator}
        if not initiator:
            raise AuthFailed("party line requires an authenticated initiator")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self._bind_host, 0))
        sock.listen(16)
        invite = PartyLineInvite(
            channel_id=new_id(),
            broker=sock.getsockname()[:2],
            participants=participants,
            initiated_by=initiator,
            expires_at=self._now() + int(payload.get("ttl_ms", self._ttl)),
        )
        channel = PartyLineChannel(invite, self._trust, self._now, sock)
        with self._lock:
            self._channels[invite.channel_id] = channel
        now = self._now()
        notified = []
        for user in sorted(participants - {initiator}):
            entry = self._table.lookup(user, now)
            if entry is None:
                continue
            try:
                call(
                    entry.endpoint,
                    RpcRequest(
                        verb=IM_PUSH,
                        payload={"partyline_invite": invite.to_wire()},
                    ),
                    deadline=5.0,
                )
                notified.append(user)
            except WsmailError:
                pass
        return {"invite": invite.to_wire(), "notified": notified}, []

    def channel(self, channel_id: str) -> Optional[PartyLineChannel]:
        with self._lock:
            return self._channels.get(channel_id)

    def close(self) -> None:
        with self._lock:
            channels = list(self._channels.values())
            self._channels.clear()
        for ch in channels:
            ch.close()


class PartyLineClient:
    """Client-side channel handle after a successful join."""

    def __init__(self, sock: socket.socket, name: str):
        self._sock = sock
        self.name = name

    def send(self, text: str) -> None:
        write_message(self._sock, {"msg": text, "chunks": 0}, [])

    def recv(self, timeout: float = 5.0) -> tuple[str, str]:
        self._sock.settimeout(timeout)
        header, _, _ = read_message(self._sock)
        return header["from"], header["msg"]

    def close(self) -> None:
        self._sock.close()


def join_party_line(
    invite: PartyLineInvite,
    name: str,
    chain: Optional[CertChain],
    key: Optional[SigningKey],
    timeout: float = 10.0,
) -> PartyLineClient:
    """Certificate-authenticated join. Raises NO_CLIENT_CERT without a
    chain+key, CHANNEL_EXPIRED after expiry."""
    if chain is None or key is None:
        raise NoClientCert("party line requires a client certificate")
    sock = socket.create_connection(invite.broker, timeout=timeout)
    try:
        sock.settimeout(timeout)
        header, _, _ = read_message(sock)
        challenge = header.get("challenge")
        if challenge is None:
            raise AuthFailed(str(header.get("error", "no challenge")))
        signature = key.sign(_join_payload(invite.channel_id, challenge))
        write_message(
            sock,
            {
                "join": {
                    "chain": chain.to_wire(),
                    "signature": canonical.b64(signature),
                },
                "chunks": 0,
            },
            [],
        )
        reply, _, _ = read_message(sock)
        if "joined" not in reply:
            code = reply.get("error", "AUTH_FAILED")
            if code == "CHANNEL_EXPIRED":
                raise ChannelExpired()
            if code == "NO_CLIENT_CERT":
                raise NoClientCert()
            raise AuthFailed(code)
        return PartyLineClient(sock, name)
    except BaseException:
        sock.close()
        raise


def decline_party_line(invite: PartyLineInvite) -> Declined:
    """Participant refusal; chat continues asynchronously."""
    return Declined(f"declined channel {invite.channel_id}")
