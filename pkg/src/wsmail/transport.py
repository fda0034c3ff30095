"""Framed RPC between agents and servers, plus domain routing.

Wire format per call: one header frame (canonical text) followed by the
binary chunk frames it declares. Every frame is 4-byte big-endian
length + payload. One request per connection.

Routing follows RFC 2782 SRV semantics over a static route table:
ascending priority groups, weighted random order within a group,
zero-weight records selectable last.
"""

from __future__ import annotations

import hashlib
import random
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import canonical
from .errors import (
    ConnectionRefused,
    FrameTooLarge,
    MalformedFrame,
    NoRoute,
    Timeout,
    WsmailError,
)
from .keys import SigningKey
from .trust import CertChain, TrustStore

# RPC verbs
SEND = "SEND"
LIST = "LIST"
RETRIEVE = "RETRIEVE"
DELETE = "DELETE"
DELIVER = "DELIVER"
TOKEN_REQUEST = "TOKEN_REQUEST"
EXTENSION = "EXTENSION"
IM_PUSH = "IM_PUSH"
VERBS = (SEND, LIST, RETRIEVE, DELETE, DELIVER, TOKEN_REQUEST, EXTENSION, IM_PUSH)

DEFAULT_FRAME_LIMIT = 64 * 1024 * 1024  # 64 MiB

OK = "OK"
ERROR = "ERROR"

# meter directions
IN = "in"
OUT = "out"

Meter = Callable[[str, str, int], None]  # (direction, verb, nbytes)


@dataclass(frozen=True)
class RpcRequest:
    verb: str
    auth: Optional[dict] = None
    payload: canonical.Value = None
    extension_id: Optional[str] = None

    def validate(self) -> None:
        if self.verb not in VERBS:
            raise MalformedFrame(f"unknown verb: {self.verb}")
        if (self.verb == EXTENSION) != (self.extension_id is not None):
            raise MalformedFrame("extension_id required iff verb is EXTENSION")

    def to_wire(self, chunk_count: int = 0) -> dict:
        w: dict = {"verb": self.verb, "payload": self.payload, "chunks": chunk_count}
        if self.auth is not None:
            w["auth"] = self.auth
        if self.extension_id is not None:
            w["extension_id"] = self.extension_id
        return w

    @classmethod
    def from_wire(cls, w: dict) -> "RpcRequest":
        req = cls(
            verb=w.get("verb", ""),
            auth=w.get("auth"),
            payload=w.get("payload"),
            extension_id=w.get("extension_id"),
        )
        req.validate()
        return req


@dataclass(frozen=True)
class RpcResponse:
    status: str
    error_code: Optional[str] = None
    payload: canonical.Value = None

    def __post_init__(self):
        if self.status == ERROR and not self.error_code:
            raise MalformedFrame("ERROR response requires error_code")

    @classmethod
    def ok(cls, payload: canonical.Value = None) -> "RpcResponse":
        return cls(OK, None, payload)

    @classmethod
    def error(cls, code: str, payload: canonical.Value = None) -> "RpcResponse":
        return cls(ERROR, code, payload)

    def to_wire(self, chunk_count: int = 0) -> dict:
        w: dict = {"status": self.status, "payload": self.payload, "chunks": chunk_count}
        if self.error_code is not None:
            w["error_code"] = self.error_code
        return w

    @classmethod
    def from_wire(cls, w: dict) -> "RpcResponse":
        return cls(w["status"], w.get("error_code"), w.get("payload"))


# ---------------------------------------------------------------- framing


def write_frame(sock: socket.socket, payload: bytes, limit: int = DEFAULT_FRAME_LIMIT) -> int:
    if len(payload) > limit:
        raise FrameTooLarge(f"{len(payload)} > {limit}")
    sock.sendall(struct.pack(">I", len(payload)) + payload)
    return 4 + len(payload)


def read_frame(sock: socket.socket, limit: int = DEFAULT_FRAME_LIMIT) -> bytes:
    header = _read_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > limit:
        raise FrameTooLarge(f"{length} > {limit}")
    return _read_exact(sock, length)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise Timeout() from exc
        if not chunk:
            raise MalformedFrame("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def write_message(
    sock: socket.socket,
    header: dict,
    chunks: list[bytes],
    limit: int = DEFAULT_FRAME_LIMIT,
) -> int:
    total = write_frame(sock, canonical.encode(header), limit)
    for chunk in chunks:
        total += write_frame(sock, chunk, limit)
    return total


def read_message(
    sock: socket.socket, limit: int = DEFAULT_FRAME_LIMIT
) -> tuple[dict, list[bytes], int]:
    raw = read_frame(sock, limit)
    nbytes = 4 + len(raw)
    try:
        header = canonical.decode(raw)
        if not isinstance(header, dict):
            raise ValueError("header must be a map")
        count = int(header.get("chunks", 0))
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedFrame(str(exc)) from exc
    chunks = []
    for _ in range(count):
        chunk = read_frame(sock, limit)
        nbytes += 4 + len(chunk)
        chunks.append(chunk)
    return header, chunks, nbytes


# ---------------------------------------------------------------- routing


@dataclass(frozen=True)
class RouteRecord:
    domain: str
    priority: int
    weight: int
    host: str
    port: int


def parse_routes(text: str) -> list[RouteRecord]:
    """One record per line: ``domain priority weight host port``."""
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"route line {lineno}: expected 5 fields")
        domain, priority, weight, host, port = parts
        records.append(
            RouteRecord(domain, int(priority), int(weight), host, int(port))
        )
    return records


def load_routes(path: str | Path) -> list[RouteRecord]:
    return parse_routes(Path(path).read_text())


def resolve(
    domain: str,
    routes: list[RouteRecord],
    rng: random.Random | None = None,
) -> list[tuple[str, int]]:
    """Ordered (host, port) endpoints for a domain, RFC 2782 style.

    Records are grouped by ascending priority. Within a group the order
    is chosen by weighted random selection without replacement: arrange
    zero-weight records first, draw r in [0, total_weight), take the
    first record whose running weight sum exceeds r. Zero-weight records
    are therefore only reachable once all weighted ones are taken.
    """
    if not domain:
        raise NoRoute("empty domain")
    rng = rng or random.Random()
    matching = [r for r in routes if r.domain == domain]
    if not matching:
        raise NoRoute(f"no route for {domain}")
    ordered: list[tuple[str, int]] = []
    for priority in sorted({r.priority for r in matching}):
        group = [r for r in matching if r.priority == priority]
        remaining = sorted(group, key=lambda r: r.weight != 0)  # zero-weight first
        while remaining:
            total = sum(r.weight for r in remaining)
            if total == 0:
                pick = remaining[rng.randrange(len(remaining))]
            else:
                r = rng.randrange(total)
                acc = 0
                pick = remaining[-1]
                for rec in remaining:
                    acc += rec.weight
                    if acc > r:
                        pick = rec
                        break
            ordered.append((pick.host, pick.port))
            remaining.remove(pick)
    return ordered


# ------------------------------------------------------------- server auth


def chunk_digests(chunks: list[bytes]) -> list[str]:
    return [hashlib.sha256(c).hexdigest() for c in chunks]


def _server_auth_payload(request: RpcRequest, chunks: list[bytes]) -> bytes:
    return canonical.encode(
        {
            "req": {
                "verb": request.verb,
                "payload": request.payload,
                "extension_id": request.extension_id,
                "chunk_digests": chunk_digests(chunks),
            }
        }
    )


def make_server_auth(
    request: RpcRequest, chunks: list[bytes], server: str, chain: CertChain, key: SigningKey
) -> dict:
    """Peer authentication for server-to-server calls: the caller signs
    the request under its cert chain's leaf key."""
    return {
        "kind": "server",
        "server": server,
        "chain": chain.to_wire(),
        "signature": canonical.b64(key.sign(_server_auth_payload(request, chunks))),
    }


def verify_server_auth(
    request: RpcRequest, chunks: list[bytes], trust: TrustStore
) -> Optional[str]:
    """Returns the authenticated peer server name, or None."""
    auth = request.auth
    if not auth or auth.get("kind") != "server":
        return None
    try:
        chain = CertChain.from_wire(auth["chain"])
        signature = canonical.unb64(auth["signature"])
    except (KeyError, ValueError):
        return None
    name = auth.get("server")
    if not name or chain.leaf.name != name:
        return None
    if not trust.chain_valid(chain):
        return None
    if not chain.leaf.key.verify(signature, _server_auth_payload(request, chunks)):
        return None
    return name


# ---------------------------------------------------------------- client


def call(
    endpoint: tuple[str, int],
    request: RpcRequest,
    chunks: list[bytes] | None = None,
    deadline: float = 30.0,
    limit: int = DEFAULT_FRAME_LIMIT,
    meter: Meter | None = None,
) -> tuple[RpcResponse, list[bytes]]:
    """One request, one response (or a transport error)."""
    request.validate()
    chunks = chunks or []
    try:
        sock = socket.create_connection(endpoint, timeout=deadline)
    except socket.timeout as exc:
        raise Timeout() from exc
    except OSError as exc:
        raise ConnectionRefused(str(exc)) from exc
    try:
        sock.settimeout(deadline)
        sent = write_message(sock, request.to_wire(len(chunks)), chunks, limit)
        header, resp_chunks, received = read_message(sock, limit)
        if meter:
            meter(OUT, request.verb, sent)
            meter(IN, request.verb, received)
        return RpcResponse.from_wire(header), resp_chunks
    except socket.timeout as exc:
        raise Timeout() from exc
    except (ConnectionResetError, BrokenPipeError) as exc:
        raise ConnectionRefused(str(exc)) from exc
    finally:
        sock.close()


def call_domain(
    domain: str,
    routes: list[RouteRecord],
    request: RpcRequest,
    chunks: list[bytes] | None = None,
    deadline: float = 30.0,
    rng: random.Random | None = None,
    meter: Meter | None = None,
) -> tuple[RpcResponse, list[bytes]]:
    """Resolve and call, failing over once per endpoint in resolve order."""
    last_error: WsmailError | None = None
    for endpoint in resolve(domain, routes, rng):
        try:
            return call(endpoint, request, chunks, deadline, meter=meter)
        except (Timeout, ConnectionRefused, MalformedFrame) as exc:
            last_error = exc
    raise last_error if last_error else NoRoute(domain)


# ---------------------------------------------------------------- server

Handler = Callable[[RpcRequest, list[bytes], tuple[str, int]], tuple[RpcResponse, list[bytes]]]


class RpcServer:
    """Threaded one-request-per-connection RPC endpoint."""

    def __init__(
        self,
        host: str,
        port: int,
        handler: Handler,
        limit: int = DEFAULT_FRAME_LIMIT,
        meter: Meter | None = None,
    ):
        self._handler = handler
        self._limit = limit
        self._meter = meter
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self._stopping = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stopping.is_set():
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(
                target=self._serve_one, args=(conn,), daemon=True
            ).start()

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(30.0)
            header, chunks, received = read_message(conn, self._limit)
            try:
                request = RpcRequest.from_wire(header)
                response, out_chunks = self._handler(request, chunks, self.endpoint)
            except WsmailError as exc:
                response, out_chunks = RpcResponse.error(exc.code, {"detail": str(exc)}), []
            except Exception as exc:  # handler bug: surface, don't hang caller
                response, out_chunks = RpcResponse.error("INTERNAL", str(exc)), []
            sent = write_message(conn, response.to_wire(len(out_chunks)), out_chunks, self._limit)
            if self._meter:
                verb = header.get("verb", "?") if isinstance(header, dict) else "?"
                self._meter(IN, verb, received)
                self._meter(OUT, verb, sent)
        except (WsmailError, OSError):
            pass
        finally:
            conn.close()

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=2)
