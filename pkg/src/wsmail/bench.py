"""Benchmark harness: a seeded mixed-operation workload against an
in-process two-domain deployment, plus a constant-rate external load
generator with a message-conservation audit.

The workload plan is derived deterministically from the seed: exact
per-kind counts are computed from the mix ratios first, then shuffled,
so reported shares depend only on the requested mix, not on sampling
noise.
"""

from __future__ import annotations

import argparse
import json
import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .agent import ClientAgent
from .envelope import Address
from .errors import WsmailError
from .keys import SigningKey
from .server import MtaServer
from .transport import RouteRecord
from .trust import (
    PASSWORD,
    TrustStore,
    UserCredentialRecord,
    hash_password,
    make_chain,
)

SEND, LIST, RETRIEVE, DELETE = "send", "list", "retrieve", "delete"
KINDS = (SEND, LIST, RETRIEVE, DELETE)

# Reference timings from the original prototype deployment, printed
# alongside fresh results for side-by-side comparison (milliseconds,
# except the rate). Not a pass/fail threshold: hardware differs.
PROTOTYPE_BASELINE = {
    "mean_ms": 284.0,
    "variance": 138.9,
    "min_ms": 46.876,
    "max_ms": 4000.0,
    "smtp_relay_mean_ms": 170.0,
    "max_rate_per_min": 1787,
}

OUTLIER_FACTOR = 10.0  # samples beyond this multiple of the median get flagged


@dataclass
class WorkloadSpec:
    seed: int = 1
    clients: int = 4
    ops_per_client: int = 500
    mix: dict = field(
        default_factory=lambda: {SEND: 0.25, LIST: 0.25, RETRIEVE: 0.25, DELETE: 0.25}
    )
    prime_inbox: int = 6
    external_rate_hz: float = 0.0
    external_duration_s: float = 0.0

    def __post_init__(self):
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix ratios must sum to 1, got {total}")
        unknown = set(self.mix) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown operation kinds: {sorted(unknown)}")

    @classmethod
    def from_file(cls, path: str | Path) -> "WorkloadSpec":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)


def op_sequence(spec: WorkloadSpec) -> list[list[str]]:
    """Per-client operation plans; deterministic for a given spec."""
    rng = random.Random(spec.seed)
    plans = []
    for client in range(spec.clients):
        counts = {k: int(spec.mix.get(k, 0.0) * spec.ops_per_client) for k in KINDS}
        short = spec.ops_per_client - sum(counts.values())
        for k in sorted(KINDS, key=lambda k: -spec.mix.get(k, 0.0))[:short]:
            counts[k] += 1
        plan = [k for k in KINDS for _ in range(counts[k])]
        rng.shuffle(plan)
        plans.append(plan)
    return plans


@dataclass(frozen=True)
class LatencySample:
    kind: str
    elapsed_ms: float
    ok: bool


# --------------------------------------------------------------- deployment


class Deployment:
    """Two in-process domains sharing one trust anchor. The external
    domain can be configured to discard inbound mail, mirroring a load
    sink that acknowledges but never stores."""

    HOME = "home.bench"
    EXTERNAL = "ext.bench"

    def __init__(self, tmp_dir: Path, n_users: int, discard_external: bool = True):
        anchor = SigningKey.generate()
        self.trust = TrustStore()
        self.trust.add_anchor("root", anchor.public)
        self.routes: list[RouteRecord] = []
        self.servers: dict[str, MtaServer] = {}
        self.bytes_in = 0
        self.bytes_out = 0
        self._meter_lock = threading.Lock()
        self.user_keys: dict[str, SigningKey] = {}

        for i in range(n_users):
            self._add_user(f"user{i}", self.HOME)
        self._add_user("sink", self.EXTERNAL)
        self._add_user("feeder", self.EXTERNAL)

        for name in (self.HOME, self.EXTERNAL):
            key = SigningKey.generate()
            self.trust.add_server_chain(
                name, make_chain(name, key.public, [], "root", anchor)
            )
            server = MtaServer(
                name=name,
                key=key,
                trust=self.trust,
                routes=self.routes,
                data_dir=tmp_dir / name,
                discard_inbound=(discard_external and name == self.EXTERNAL),
                meter=self._meter if name == self.HOME else None,
            ).start()
            self.servers[name] = server
            host, port = server.endpoint
            self.routes.append(RouteRecord(name, 0, 1, host, port))

    def _add_user(self, local: str, domain: str) -> None:
        address = f"{local}@{domain}"
        salt, digest = hash_password(f"pw-{local}")
        key = SigningKey.generate()
        self.user_keys[address] = key
        self.trust.add_user(
            UserCredentialRecord(
                Address(local, domain),
                PASSWORD,
                password_salt=salt,
                password_hash=digest,
                public_key=key.public,
            )
        )

    def _meter(self, direction: str, verb: str, nbytes: int) -> None:
        with self._meter_lock:
            if direction == "in":
                self.bytes_in += nbytes
            else:
                self.bytes_out += nbytes

    def agent(self, address: str) -> ClientAgent:
        local = address.split("@", 1)[0]
        return ClientAgent(
            address=Address.parse(address),
            key=self.user_keys[address],
            password=f"pw-{local}",
            routes=self.routes,
            trust=self.trust,
        )

    def close(self) -> None:
        for server in self.servers.values():
            server.stop()


# ------------------------------------------------------------------ workload


class _BenchClient:
    def __init__(self, deployment: Deployment, index: int, n_users: int, seed: int):
        self.address = f"user{index}@{Deployment.HOME}"
        self.agent = deployment.agent(self.address)
        self.rng = random.Random((seed << 16) | index)
        self.peer = f"user{(index + 1) % n_users}@{Deployment.HOME}"
        self.external = f"sink@{Deployment.EXTERNAL}"
        self.known_ids: list[str] = []
        self.samples: list[LatencySample] = []

    def run(self, plan: list[str]) -> None:
        for kind in plan:
            started = time.perf_counter()
            ok = True
            try:
                self._execute(kind)
            except WsmailError:
                ok = False
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            self.samples.append(LatencySample(kind, elapsed_ms, ok))

    def _execute(self, kind: str) -> None:
        if kind == SEND:
            # each send exercises one local and one cross-domain recipient
            self.agent.send(
                to=[Address.parse(self.peer), Address.parse(self.external)],
                subject=f"bench-{self.rng.randrange(1 << 30)}",
                body=b"x" * 256,
            )
        elif kind == LIST:
            self.known_ids = [h["message_id"] for h in self.agent.inbox()]
        elif kind == RETRIEVE:
            if not self.known_ids:
                self.known_ids = [h["message_id"] for h in self.agent.inbox()]
            if self.known_ids:
                self.agent.retrieve(self.rng.choice(self.known_ids))
        elif kind == DELETE:
            if not self.known_ids:
                self.known_ids = [h["message_id"] for h in self.agent.inbox()]
            if self.known_ids:
                # deleting an already-deleted id is a counted no-op
                try:
                    self.agent.delete(self.known_ids.pop())
                except WsmailError as exc:
                    if exc.code != "NOT_FOUND":
                        raise


def _prime_inboxes(deployment: Deployment, n_users: int, per_user: int) -> None:
    for i in range(n_users):
        sender = deployment.agent(f"user{(i + 1) % n_users}@{Deployment.HOME}")
        for j in range(per_user):
            sender.send(
                to=[Address(f"user{i}", Deployment.HOME)],
                subject=f"primer-{j}",
                body=b"primer",
            )


# ------------------------------------------------------------------- report


def _stats(values: list[float]) -> dict:
    if not values:
        return {"count": 0, "mean_ms": 0.0, "variance": 0.0, "min_ms": 0.0, "max_ms": 0.0}
    return {
        "count": len(values),
        "mean_ms": statistics.fmean(values),
        "variance": statistics.pvariance(values) if len(values) > 1 else 0.0,
        "min_ms": min(values),
        "max_ms": max(values),
    }


@dataclass
class BenchReport:
    spec: WorkloadSpec
    samples: list[LatencySample]
    bytes_in: int
    bytes_out: int
    conservation: dict

    def per_kind(self) -> dict:
        total = len(self.samples)
        out = {}
        for kind in KINDS:
            values = [s.elapsed_ms for s in self.samples if s.kind == kind]
            entry = _stats(values)
            entry["share"] = (len(values) / total) if total else 0.0
            out[kind] = entry
        return out

    def overall(self) -> dict:
        return _stats([s.elapsed_ms for s in self.samples])

    def outliers(self) -> list[dict]:
        values = sorted(s.elapsed_ms for s in self.samples)
        if not values:
            return []
        median = values[len(values) // 2]
        cutoff = median * OUTLIER_FACTOR
        return [
            {"kind": s.kind, "elapsed_ms": s.elapsed_ms}
            for s in self.samples
            if median > 0 and s.elapsed_ms > cutoff
        ]

    def to_dict(self) -> dict:
        return {
            "spec": {
                "seed": self.spec.seed,
                "clients": self.spec.clients,
                "ops_per_client": self.spec.ops_per_client,
                "mix": self.spec.mix,
            },
            "overall": self.overall(),
            "per_kind": self.per_kind(),
            "outliers": self.outliers(),
            "data_volume": {"bytes_in": self.bytes_in, "bytes_out": self.bytes_out},
            "conservation": self.conservation,
            "prototype_baseline": PROTOTYPE_BASELINE,
        }

    def render_text(self) -> str:
        lines = []
        overall = self.overall()
        lines.append(
            f"{'kind':<10}{'count':>7}{'share':>8}{'mean ms':>10}"
            f"{'var':>10}{'min ms':>10}{'max ms':>10}"
        )
        for kind, entry in self.per_kind().items():
            lines.append(
                f"{kind:<10}{entry['count']:>7}{entry['share']:>8.1%}"
                f"{entry['mean_ms']:>10.2f}{entry['variance']:>10.1f}"
                f"{entry['min_ms']:>10.2f}{entry['max_ms']:>10.2f}"
            )
        lines.append(
            f"{'overall':<10}{overall['count']:>7}{'':>8}{overall['mean_ms']:>10.2f}"
            f"{overall['variance']:>10.1f}{overall['min_ms']:>10.2f}{overall['max_ms']:>10.2f}"
        )
        lines.append(
            f"data volume: {self.bytes_in} bytes in, {self.bytes_out} bytes out"
        )
        flagged = self.outliers()
        lines.append(f"outliers (>{OUTLIER_FACTOR:g}x median): {len(flagged)}")
        if self.conservation:
            c = self.conservation
            lines.append(
                "conservation: sent={sent} stored={stored} discarded={discarded}"
                " dead={dead} conserved={conserved}".format(**c)
            )
        b = PROTOTYPE_BASELINE
        lines.append(
            "prototype baseline: mean {mean_ms} ms, variance {variance},"
            " min {min_ms} ms, max {max_ms} ms; plain SMTP relay {smtp_relay_mean_ms} ms;"
            " peak {max_rate_per_min} msgs/min".format(**b)
        )
        return "\n".join(lines)


# -------------------------------------------------------------------- runs


def run_mix(spec: WorkloadSpec, tmp_dir: str | Path) -> BenchReport:
    deployment = Deployment(Path(tmp_dir), spec.clients, discard_external=True)
    counters = {"stored": 0, "discarded": 0, "dead": 0, "relayed": 0}
    lock = threading.Lock()

    def count(kind, record):
        with lock:
            if kind == "STORED":
                counters["stored"] += 1
            elif kind == "DISCARDED":
                counters["discarded"] += 1
            elif kind == "DEAD_LETTER":
                counters["dead"] += 1
            elif kind == "RELAYED":
                counters["relayed"] += 1

    for server in deployment.servers.values():
        server.subscribe(count)
    try:
        _prime_inboxes(deployment, spec.clients, spec.prime_inbox)
        plans = op_sequence(spec)
        clients = [
            _BenchClient(deployment, i, spec.clients, spec.seed)
            for i in range(spec.clients)
        ]
        threads = [
            threading.Thread(target=c.run, args=(plans[i],))
            for i, c in enumerate(clients)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        _wait_for_queues(deployment)
        samples = [s for c in clients for s in c.samples]
        with lock:
            conservation = dict(counters)
        sends = sum(1 for s in samples if s.kind == SEND and s.ok)
        primers = spec.clients * spec.prime_inbox
        conservation["sent"] = sends + primers
        # every send produces one local store plus one external copy that
        # is either relayed (then discarded by the sink) or dead-lettered
        conservation["conserved"] = (
            conservation["stored"] == conservation["sent"]
            and sends == conservation["discarded"] + conservation["dead"]
        )
        return BenchReport(
            spec=spec,
            samples=samples,
            bytes_in=deployment.bytes_in,
            bytes_out=deployment.bytes_out,
            conservation=conservation,
        )
    finally:
        deployment.close()


def _wait_for_queues(deployment: Deployment, timeout: float = 60.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        depth = sum(s.store.queue_size() for s in deployment.servers.values())
        if depth == 0:
            return
        time.sleep(0.05)


def run_external_load(
    rate_hz: float, duration_s: float, tmp_dir: str | Path, recipients: int = 1
) -> dict:
    """Constant-rate feed from the external domain into the home domain
    (the reverse direction of the mix run), with a conservation audit."""
    deployment = Deployment(Path(tmp_dir), recipients, discard_external=False)
    dead = [0]
    deployment.servers[Deployment.EXTERNAL].subscribe(
        lambda kind, rec: dead.__setitem__(0, dead[0] + 1) if kind == "DEAD_LETTER" else None
    )
    try:
        feeder = deployment.agent(f"feeder@{Deployment.EXTERNAL}")
        target = Address(f"user0", Deployment.HOME)
        rng = random.Random(0)
        interval = 1.0 / rate_hz
        sent = 0
        started = time.monotonic()
        next_at = started
        while next_at < started + duration_s:
            feeder.send(to=[target], subject=f"load-{sent}", body=b"load")
            sent += 1
            next_at += interval * rng.uniform(0.95, 1.05)  # rate jitter within 5%
            delay = next_at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        _wait_for_queues(deployment)
        home = deployment.servers[Deployment.HOME]
        stored = home.store.message_count(target)
        return {
            "sent": sent,
            "stored": stored,
            "dead": dead[0],
            "elapsed_s": time.monotonic() - started,
            "conserved": sent == stored + dead[0],
        }
    finally:
        deployment.close()


# --------------------------------------------------------------------- CLI


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="wsmail-bench", description="workload benchmark")
    parser.add_argument("--spec", help="workload spec file (JSON)")
    parser.add_argument("--report", help="write the JSON report here")
    parser.add_argument("--data-dir", default="bench-data")
    args = parser.parse_args(argv)
    spec = WorkloadSpec.from_file(args.spec) if args.spec else WorkloadSpec()
    report = run_mix(spec, args.data_dir)
    print(report.render_text())
    if spec.external_rate_hz > 0 and spec.external_duration_s > 0:
        load = run_external_load(
            spec.external_rate_hz, spec.external_duration_s, args.data_dir
        )
        print(
            "external load: sent={sent} stored={stored} dead={dead}"
            " in {elapsed_s:.1f}s conserved={conserved}".format(**load)
        )
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
