"""Server plug-in pipeline: registration, ordering, dispatch.

Three kinds. SENDING processors transform outbound envelopes in
priority order. DELIVERY processors run in priority order until one
claims the message; otherwise the server falls back to default local
delivery. EXTENSION processors answer RPC requests routed by exact
extension id.

A plug-in that raises is skipped and logged; the message continues
through the rest of the pipeline.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import canonical
from .envelope import Envelope
from .errors import (
    DuplicateExtensionId,
    PipelineRejected,
    UnknownExtensionId,
    UnknownPlugin,
)

log = logging.getLogger(__name__)

SENDING = "SENDING"
DELIVERY = "DELIVERY"
EXTENSION = "EXTENSION"
KINDS = (SENDING, DELIVERY, EXTENSION)

HANDLED = "HANDLED"
PASS = "PASS"


@dataclass(frozen=True)
class ServerPluginRegistration:
    name: str
    kinds: frozenset[str]
    extension_id: Optional[str] = None
    queue_priority: int = 100
    enabled: bool = True

    def __post_init__(self):
        if not self.kinds or not self.kinds <= set(KINDS):
            raise ValueError(f"bad kinds: {set(self.kinds)}")
        if (EXTENSION in self.kinds) != (self.extension_id is not None):
            raise ValueError("extension_id required iff EXTENSION kind present")


@dataclass
class PluginEnvironment:
    """Handles passed to DELIVERY and EXTENSION plug-ins only.

    SENDING processors receive just the message.
    """

    principal: Optional[str]  # authenticated caller (address or server name)
    store: object = None  # MessageStore
    server: object = None  # owning MtaServer (token issue, config, push)
    recipient: Optional[object] = None  # Address, set per local delivery
    request_payload: canonical.Value = None
    request_chunks: list = field(default_factory=list)


class ServerPlugin:
    """Base class; override the hooks for the kinds you register."""

    def on_sending(self, env: Envelope) -> Envelope:
        return env

    def on_delivery(self, env: Envelope, environment: PluginEnvironment) -> str:
        return PASS

    def on_extension(
        self, payload: canonical.Value, environment: PluginEnvironment
    ) -> tuple[canonical.Value, list[bytes]]:
        raise NotImplementedError


@dataclass(frozen=True)
class _Entry:
    registration: ServerPluginRegistration
    plugin: ServerPlugin


class PluginRegistry:
    """Mutations are exclusive; each dispatch runs on a consistent snapshot."""

    def __init__(self):
        self._lock = threading.RLock()
        self._entries: dict[str, _Entry] = {}

    # ------------------------------------------------------------- admin

    def register(self, registration: ServerPluginRegistration, plugin: ServerPlugin) -> None:
        with self._lock:
            if registration.enabled and registration.extension_id is not None:
                for entry in self._entries.values():
                    if (
                        entry.registration.enabled
                        and entry.registration.extension_id == registration.extension_id
                    ):
                        raise DuplicateExtensionId(registration.extension_id)
            self._entries[registration.name] = _Entry(registration, plugin)

    def unregister(self, name: str) -> None:
        with self._lock:
            if name not in self._entries:
                raise UnknownPlugin(name)
            del self._entries[name]

    def set_priority(self, name: str, priority: int) -> None:
        with self._lock:
            entry = self._entries.get(name)
            if entry is None:
                raise UnknownPlugin(name)
            self._entries[name] = replace(
                entry, registration=replace(entry.registration, queue_priority=priority)
            )

    def set_enabled(self, name: str, enabled: bool) -> None:
        with self._lock:
            entry = self._entries.get(name)
            if entry is None:
                raise UnknownPlugin(name)
            reg = replace(entry.registration, enabled=enabled)
            if enabled and reg.extension_id is not None:
                for other, e in self._entries.items():
                    if (
                        other != name
                        and e.registration.enabled
                        and e.registration.extension_id == reg.extension_id
                    ):
                        raise DuplicateExtensionId(reg.extension_id)
            self._entries[name] = replace(entry, registration=reg)

    def registrations(self) -> list[ServerPluginRegistration]:
        with self._lock:
            return [e.registration for e in self._entries.values()]

    def _snapshot(self, kind: str) -> list[_Entry]:
        with self._lock:
            entries = [
                e
                for e in self._entries.values()
                if e.registration.enabled and kind in e.registration.kinds
            ]
        # stable sort: ties keep registration order
        entries.sort(key=lambda e: e.registration.queue_priority)
        return entries

    # ---------------------------------------------------------- dispatch

    def dispatch_sending(self, env: Envelope) -> Envelope:
        for entry in self._snapshot(SENDING):
            try:
                env = entry.plugin.on_sending(env)
            except PipelineRejected:
                raise  # deliberate rejection: the send fails
            except Exception:
                log.exception("sending plug-in %s failed; skipped", entry.registration.name)
        return env

    def dispatch_delivery(self, env: Envelope, environment: PluginEnvironment) -> str:
        """HANDLED if some delivery plug-in claimed the message, else PASS
        (caller performs default local delivery)."""
        for entry in self._snapshot(DELIVERY):
            try:
                verdict = entry.plugin.on_delivery(env, environment)
            except Exception:
                log.exception("delivery plug-in %s failed; skipped", entry.registration.name)
                continue
            if verdict == HANDLED:
                return HANDLED
        return PASS

    def dispatch_extension(
        self,
        extension_id: str,
        payload: canonical.Value,
        environment: PluginEnvironment,
    ) -> tuple[canonical.Value, list[bytes]]:
        for entry in self._snapshot(EXTENSION):
            if entry.registration.extension_id == extension_id:
                return entry.plugin.on_extension(payload, environment)
        raise UnknownExtensionId(extension_id)


# ----------------------------------------------------------- config loading

PluginFactory = Callable[[dict], ServerPlugin]


def registration_from_config(entry: dict) -> ServerPluginRegistration:
    return ServerPluginRegistration(
        name=entry["name"],
        kinds=frozenset(entry["kinds"]),
        extension_id=entry.get("extension_id"),
        queue_priority=entry.get("priority", 100),
        enabled=entry.get("enabled", True),
    )
