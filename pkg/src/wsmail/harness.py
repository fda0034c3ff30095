"""Randomized protocol exploration for the on-demand attachment flow.

Each seed drives one simulated world with four honest roles running the
real module code in-process — sending client, sending server, receiving
server, receiving client — plus an attacker who owns a legitimate
account and keypair, may craft arbitrary envelopes and signatures with
the keys it holds, and may replay anything it has seen in its own
sessions.

Checked properties (over the recorded event trace):
  fetch-correspondence  every accepted attachment fetch maps to an
                        earlier strip event with the same blob id, the
                        same claimed sender, and the fetching principal
                        in the stored access list
  token-single-use      no two accepted fetches present the same token
  token-expiry          no fetch is accepted at or after token expiry

`--leak-key` hands the attacker the sending server's signing key. The
attacker can then forge an origin-signed envelope that attributes its
own attachment to the honest sender, which a run is expected to catch
as a fetch-correspondence violation — a falsifiability check that the
harness can actually detect what it claims to rule out.

Counterexamples are shrunk by greedy single-event deletion, replaying
after each deletion, until no single deletion preserves the violation.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from . import canonical, envelope as env_mod
from .clockutil import ManualClock
from .envelope import (
    AUTHOR,
    ORIGIN_SERVER,
    Address,
    BodyPart,
    Envelope,
    new_id,
)
from .errors import NotACounterexample, WsmailError
from .keys import SigningKey
from .ondemand import (
    ATTACHMENT_CONTENT_TYPE,
    DECLARED_HEADER,
    FetchAttachmentPlugin,
    StripAttachmentsPlugin,
    declare_attachment,
)
from .plugins import PluginEnvironment
from .store import MessageStore
from .trust import (
    PUBLIC_KEY,
    valid_origin_signature,
    ReplayCache,
    TrustStore,
    UserCredentialRecord,
    issue_federated_token,
    make_chain,
)

T0 = 1_750_000_000_000

SENDING_DOMAIN = "origin.sim"
RECEIVING_DOMAIN = "dest.sim"
SENDER = f"sc@{SENDING_DOMAIN}"
RECEIVER = f"rc@{RECEIVING_DOMAIN}"
ATTACKER = f"att@{SENDING_DOMAIN}"

FETCH_CORRESPONDENCE = "fetch-correspondence"
TOKEN_SINGLE_USE = "token-single-use"
TOKEN_EXPIRY = "token-expiry"

OP_KINDS = (
    "honest_send",
    "receiver_token",
    "receiver_fetch",
    "attacker_send",
    "attacker_token",
    "attacker_fetch",
    "attacker_forge",
    "advance_clock",
)


def generate_ops(rng: random.Random, max_len: int) -> list[dict]:
    """Pre-draw all randomness so a plan replays deterministically."""
    n = rng.randint(1, max_len)
    ops = []
    for _ in range(n):
        kind = rng.choice(OP_KINDS)
        op = {"op": kind, "pick": rng.randrange(1 << 16)}
        if kind in ("honest_send", "attacker_send"):
            op["blob_seed"] = rng.randrange(1 << 30)
            op["size"] = rng.randint(1, 512)
        elif kind == "advance_clock":
            # occasionally jump past the token TTL
            op["ms"] = rng.choice([1, 1000, 60_000, 400_000, 700_000])
        elif kind in ("receiver_fetch", "attacker_fetch"):
            op["reuse_token"] = rng.random() < 0.3
        ops.append(op)
    return ops


@dataclass(frozen=True)
class Counterexample:
    seed: int
    property: str
    detail: str
    ops: list
    trace: list

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "property": self.property,
            "detail": self.detail,
            "ops": self.ops,
            "trace": self.trace,
        }


class World:
    """One simulated federation; all state is in-process and ephemeral."""

    def __init__(self, leak_key: bool):
        self.clock = ManualClock(T0)
        self.trace: list[dict] = []
        anchor = SigningKey.generate()
        self.trust = TrustStore()
        self.trust.add_anchor("root", anchor.public)
        self.pss_key = SigningKey.generate()
        self.rs_key = SigningKey.generate()
        self.trust.add_server_chain(
            SENDING_DOMAIN, make_chain(SENDING_DOMAIN, self.pss_key.public, [], "root", anchor)
        )
        self.trust.add_server_chain(
            RECEIVING_DOMAIN, make_chain(RECEIVING_DOMAIN, self.rs_key.public, [], "root", anchor)
        )
        self.user_keys = {
            name: SigningKey.generate() for name in (SENDER, RECEIVER, ATTACKER)
        }
        for name, key in self.user_keys.items():
            self.trust.add_user(
                UserCredentialRecord(Address.parse(name), PUBLIC_KEY, public_key=key.public)
            )
        self.store_pss = MessageStore(":memory:")
        self.store_rs = MessageStore(":memory:")
        self.replay_pss = ReplayCache()
        self.strip = StripAttachmentsPlugin(
            self.store_pss, SENDING_DOMAIN, emit=self._plugin_event
        )
        self.fetch = FetchAttachmentPlugin(
            self.store_pss,
            SENDING_DOMAIN,
            self.trust,
            self.replay_pss,
            self.clock.now_ms,
            emit=self._plugin_event,
        )
        # the attacker's view: keys it owns, tickets and tokens from its
        # own sessions, and (only under --leak-key) the origin server key
        self.attacker_key = self.user_keys[ATTACKER]
        self.leaked_origin_key: Optional[SigningKey] = self.pss_key if leak_key else None
        self.attacker_tickets: list = []
        self.attacker_tokens: list = []
        self.receiver_mailbox: list[Envelope] = []
        self.receiver_tokens: list = []
        self.used_tokens: list = []

    # ------------------------------------------------------------- trace

    def _plugin_event(self, kind: str, fields: dict) -> None:
        self.trace.append({"event": kind, "at": self.clock.now_ms(), **fields})

    def _record(self, kind: str, **fields) -> None:
        self.trace.append({"event": kind, "at": self.clock.now_ms(), **fields})

    # ------------------------------------------------------------- roles

    def _compose(self, sender: str, blob: bytes) -> Envelope:
        env = Envelope(
            message_id=new_id(),
            sender=Address.parse(sender),
            to=(Address.parse(RECEIVER),),
            subject="sim",
            sent_at=self.clock.now_ms(),
            body=(
                BodyPart("text/plain", b"sim"),
                BodyPart(ATTACHMENT_CONTENT_TYPE, blob),
            ),
            headers=((DECLARED_HEADER, [declare_attachment("blob", blob)]),),
        )
        return env_mod.sign(
            env, self.user_keys[sender], sender, AUTHOR, signed_at=self.clock.now_ms()
        )

    def _origin_accepts(self, env: Envelope) -> bool:
        """The receiving server's check before storing relayed mail."""
        return valid_origin_signature(env, self.trust)

    def _deliver_to_receiver(self, env: Envelope, injected_by_attacker: bool) -> bool:
        accepted = self._origin_accepts(env)
        if injected_by_attacker:
            self._record(
                "ATTACKER_INJECT",
                accepted=accepted,
                claimed_sender=str(env.sender),
                guids=[t.guid for t in env.attachments],
            )
        if accepted:
            self.store_rs.put_message(
                Address.parse(RECEIVER), env, received_at=self.clock.now_ms()
            )
            self.receiver_mailbox.append(env)
        return accepted

    def _issue_token(self, subject: str, issuer: str, key: SigningKey) -> object:
        token = issue_federated_token(
            issuer,
            key,
            Address.parse(subject),
            SENDING_DOMAIN,
            self.trust,
            now=self.clock.now_ms(),
        )
        self._record(
            "TOKEN_ISSUED",
            subject=subject,
            token_id=token.token_id,
            expires_at=token.expires_at,
        )
        return token

    def _do_fetch(self, env: Envelope, ticket, token) -> None:
        now = self.clock.now_ms()
        try:
            meta, chunks = self.fetch.on_extension(
                {"guid": ticket.guid, "token": token.to_wire()},
                PluginEnvironment(principal=None, store=self.store_pss),
            )
        except WsmailError:
            return  # the plug-in already emitted RETRIEVE_DENIED
        # enrich the plug-in's RETRIEVE_OK with what the fetcher saw
        for entry in reversed(self.trace):
            if entry["event"] == "RETRIEVE_OK" and entry["guid"] == ticket.guid:
                entry.setdefault("claimed_sender", str(env.sender))
                entry.setdefault("token_id", token.token_id)
                entry.setdefault("token_expires_at", token.expires_at)
                entry.setdefault("fetched_at", now)
                break

    # ---------------------------------------------------------------- ops

    def execute(self, op: dict) -> None:
        kind = op["op"]
        if kind == "honest_send":
            blob = random.Random(op["blob_seed"]).randbytes(op["size"])
            env = self._compose(SENDER, blob)
            env = self.strip.on_sending(env)
            env = env_mod.sign(
                env, self.pss_key, SENDING_DOMAIN, ORIGIN_SERVER,
                signed_at=self.clock.now_ms(),
            )
            self._deliver_to_receiver(env, injected_by_attacker=False)
        elif kind == "attacker_send":
            # the attacker is a real customer; this is an honest send
            # under its own name, which seeds its knowledge of tickets
            blob = random.Random(op["blob_seed"]).randbytes(op["size"])
            env = self._compose(ATTACKER, blob)
            env = self.strip.on_sending(env)
            self.attacker_tickets.extend(env.attachments)
            env = env_mod.sign(
                env, self.pss_key, SENDING_DOMAIN, ORIGIN_SERVER,
                signed_at=self.clock.now_ms(),
            )
            self._deliver_to_receiver(env, injected_by_attacker=False)
        elif kind == "receiver_token":
            self.receiver_tokens.append(
                self._issue_token(RECEIVER, RECEIVING_DOMAIN, self.rs_key)
            )
        elif kind == "attacker_token":
            self.attacker_tokens.append(
                self._issue_token(ATTACKER, SENDING_DOMAIN, self.pss_key)
            )
        elif kind == "receiver_fetch":
            if not self.receiver_mailbox:
                return
            env = self.receiver_mailbox[op["pick"] % len(self.receiver_mailbox)]
            if not env.attachments:
                return
            ticket = env.attachments[op["pick"] % len(env.attachments)]
            pool = self.used_tokens if op["reuse_token"] and self.used_tokens else self.receiver_tokens
            if not pool:
                return
            token = pool[op["pick"] % len(pool)]
            if token in self.receiver_tokens:
                self.receiver_tokens.remove(token)
                self.used_tokens.append(token)
            self._do_fetch(env, ticket, token)
        elif kind == "attacker_fetch":
            # the attacker fetches one of its own tickets with its own token
            if not self.attacker_tickets or not self.attacker_tokens:
                return
            ticket = self.attacker_tickets[op["pick"] % len(self.attacker_tickets)]
            token = self.attacker_tokens.pop(op["pick"] % len(self.attacker_tokens))
            fake_env = replace(
                self._bare_envelope(ATTACKER), attachments=(ticket,)
            )
            self._do_fetch(fake_env, ticket, token)
        elif kind == "attacker_forge":
            # craft an envelope that claims the honest sender wrote the
            # attacker's attachment, origin-signed with whatever server
            # key the attacker holds
            if not self.attacker_tickets:
                return
            ticket = self.attacker_tickets[op["pick"] % len(self.attacker_tickets)]
            env = replace(self._bare_envelope(SENDER), attachments=(ticket,))
            signing_key = self.leaked_origin_key or self.attacker_key
            env = env_mod.sign(
                env, signing_key, SENDING_DOMAIN, ORIGIN_SERVER,
                signed_at=self.clock.now_ms(),
            )
            self._deliver_to_receiver(env, injected_by_attacker=True)
        elif kind == "advance_clock":
            self.clock.advance_ms(op["ms"])

    def _bare_envelope(self, sender: str) -> Envelope:
        return Envelope(
            message_id=new_id(),
            sender=Address.parse(sender),
            to=(Address.parse(RECEIVER),),
            subject="sim",
            sent_at=self.clock.now_ms(),
            body=(BodyPart("text/plain", b"sim"),),
        )

    def close(self) -> None:
        self.store_pss.close()
        self.store_rs.close()


# -------------------------------------------------------------- properties


def check_trace(trace: list[dict]) -> Optional[tuple[str, str]]:
    """Returns (property, detail) for the first violation, else None."""
    stripped: dict[str, dict] = {}
    seen_tokens: set[str] = set()
    for entry in trace:
        event = entry["event"]
        if event == "SEND_STRIPPED":
            stripped[entry["guid"]] = entry
        elif event == "RETRIEVE_OK":
            guid = entry["guid"]
            origin = stripped.get(guid)
            if origin is None:
                return FETCH_CORRESPONDENCE, f"fetch of {guid} with no strip event"
            subject = entry.get("subject")
            if subject not in origin["acl"]:
                return (
                    FETCH_CORRESPONDENCE,
                    f"{subject} fetched {guid} but the access list is {origin['acl']}",
                )
            claimed = entry.get("claimed_sender")
            if claimed is not None and claimed != origin["sender"]:
                return (
                    FETCH_CORRESPONDENCE,
                    f"{guid} served as mail from {claimed}, but was stored by {origin['sender']}",
                )
            token_id = entry.get("token_id")
            if token_id is not None:
                if token_id in seen_tokens:
                    return TOKEN_SINGLE_USE, f"token {token_id} accepted twice"
                seen_tokens.add(token_id)
            expires = entry.get("token_expires_at")
            fetched_at = entry.get("fetched_at")
            if expires is not None and fetched_at is not None and fetched_at >= expires:
                return TOKEN_EXPIRY, f"token accepted at {fetched_at} >= expiry {expires}"
    return None


# ------------------------------------------------------------- exploration


def run_ops(ops: list[dict], leak_key: bool) -> tuple[list[dict], Optional[tuple[str, str]]]:
    world = World(leak_key)
    try:
        for op in ops:
            world.execute(op)
        return world.trace, check_trace(world.trace)
    finally:
        world.close()


def explore(seed: int, max_len: int, leak_key: bool = False) -> Optional[Counterexample]:
    ops = generate_ops(random.Random(seed), max_len)
    trace, violation = run_ops(ops, leak_key)
    if violation is None:
        return None
    prop, detail = violation
    return Counterexample(seed=seed, property=prop, detail=detail, ops=ops, trace=trace)


def shrink(example: Counterexample, leak_key: bool = False) -> Counterexample:
    """Greedy single-deletion minimization to a fixed point."""
    ops = list(example.ops)
    trace, violation = run_ops(ops, leak_key)
    if violation is None:
        raise NotACounterexample(
            f"seed {example.seed} does not reproduce {example.property}"
        )
    changed = True
    while changed:
        changed = False
        for i in range(len(ops)):
            candidate = ops[:i] + ops[i + 1:]
            c_trace, c_violation = run_ops(candidate, leak_key)
            if c_violation is not None and c_violation[0] == example.property:
                ops = candidate
                trace, violation = c_trace, c_violation
                changed = True
                break
    return Counterexample(
        seed=example.seed,
        property=violation[0],
        detail=violation[1],
        ops=ops,
        trace=trace,
    )


# --------------------------------------------------------------------- CLI


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="wsmail-verify", description="randomized protocol property checks"
    )
    parser.add_argument("--seeds", type=int, default=1000, help="number of seeds to run")
    parser.add_argument("--max-len", type=int, default=40, help="max events per run")
    parser.add_argument(
        "--leak-key",
        action="store_true",
        help="give the attacker the sending server's key (expects a violation)",
    )
    parser.add_argument("--out-dir", default=".", help="where counterexamples are written")
    args = parser.parse_args(argv)

    started = time.monotonic()
    found: Optional[Counterexample] = None
    for seed in range(args.seeds):
        example = explore(seed, args.max_len, args.leak_key)
        if example is not None:
            found = example
            break
    elapsed = time.monotonic() - started

    if found is None:
        print(
            f"no property violations in {args.seeds} seeds"
            f" (max {args.max_len} events each, {elapsed:.1f}s)"
        )
        if args.leak_key:
            print("expected a violation under --leak-key but found none")
            return 1
        return 0

    minimized = shrink(found, args.leak_key)
    out = Path(args.out_dir) / f"counterexample-seed{minimized.seed}.json"
    out.write_text(json.dumps(minimized.to_dict(), indent=2, default=str))
    print(
        f"violation of {minimized.property} at seed {minimized.seed}"
        f" ({len(found.ops)} events, {len(minimized.ops)} after shrinking, {elapsed:.1f}s)"
    )
    print(f"  {minimized.detail}")
    print(f"  trace written to {out}")
    if args.leak_key:
        print("violation found as expected under --leak-key")
        return 0
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
