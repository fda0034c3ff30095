"""Routed workflow forms with ordered sign-off signature chains.

Each approval signs the canonical encoding of the payload, the route,
and every earlier approval, so approval k seals the whole history
before it. A third party holding the trust store, the role directory,
and the delegation rules can re-verify the chain offline.

Delegated approvals record both the actual signer and the principal
whose route step they satisfy, so audits show who really signed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from typing import Optional

from . import canonical
from .clockutil import now_ms
from .envelope import (
    APPROVER,
    FORM_HEADER,
    HAS_FORM,
    Envelope,
    SignatureBlock,
)
from .errors import NotYourTurn, RuleError, SchemaViolation
from .keys import SigningKey
from .packages import FormPackage, PluginManifest

ROLE_PREFIX = "role:"

# audit states
VALID = "VALID"
INVALID = "INVALID"
UNKNOWN_KEY = "UNKNOWN_KEY"


@dataclass(frozen=True)
class RouteStep:
    approver: str  # address or "role:<name>"
    delegates: frozenset[str] = frozenset()

    def to_wire(self) -> dict:
        return {"approver": self.approver, "delegates": sorted(self.delegates)}

    @classmethod
    def from_wire(cls, w: dict) -> "RouteStep":
        return cls(w["approver"], frozenset(w.get("delegates", ())))


@dataclass(frozen=True)
class DelegationRule:
    principal: str
    delegates: frozenset[str]
    scope: str = "*"  # form_type filter, "*" matches all

    def __post_init__(self):
        if self.principal in self.delegates:
            raise ValueError("principal cannot delegate to itself")

    def matches(self, principal: str, signer: str, form_type: str) -> bool:
        return (
            self.principal == principal
            and signer in self.delegates
            and self.scope in ("*", form_type)
        )


@dataclass(frozen=True)
class Approval:
    block: SignatureBlock  # role APPROVER, signer = actual signer
    principal: str  # the route-step approver this satisfies

    def to_wire(self) -> dict:
        return {"signature": self.block.to_wire(), "principal": self.principal}

    @classmethod
    def from_wire(cls, w: dict) -> "Approval":
        return cls(SignatureBlock.from_wire(w["signature"]), w["principal"])


@dataclass(frozen=True)
class RoutedForm:
    form_type: str
    schema_version: str
    payload: dict
    route: tuple[RouteStep, ...]
    approvals: tuple[Approval, ...] = ()
    manifest: Optional[PluginManifest] = None

    def to_wire(self) -> dict:
        w = {
            "form_type": self.form_type,
            "schema_version": self.schema_version,
            "payload": self.payload,
            "route": [s.to_wire() for s in self.route],
            "approvals": [a.to_wire() for a in self.approvals],
        }
        if self.manifest is not None:
            w["manifest"] = self.manifest.to_wire()
        return w

    @classmethod
    def from_wire(cls, w: dict) -> "RoutedForm":
        return cls(
            form_type=w["form_type"],
            schema_version=w["schema_version"],
            payload=w["payload"],
            route=tuple(RouteStep.from_wire(s) for s in w["route"]),
            approvals=tuple(Approval.from_wire(a) for a in w.get("approvals", ())),
            manifest=PluginManifest.from_wire(w["manifest"]) if w.get("manifest") else None,
        )

    @property
    def next_step_index(self) -> int:
        return len(self.approvals)

    @property
    def complete(self) -> bool:
        return len(self.approvals) >= len(self.route)


def signed_prefix_bytes(form: RoutedForm, approval_count: int) -> bytes:
    """What approval[approval_count] signs: payload, route, all earlier
    approvals (the manifest travels alongside, unsigned)."""
    return canonical.encode(
        {
            "routed_form": {
                "form_type": form.form_type,
                "schema_version": form.schema_version,
                "payload": form.payload,
                "route": [s.to_wire() for s in form.route],
                "approvals": [a.to_wire() for a in form.approvals[:approval_count]],
            }
        }
    )


def resolve_approver(approver: str, directory: dict[str, str] | None) -> Optional[str]:
    """Role names resolve through the directory; addresses pass through."""
    if approver.startswith(ROLE_PREFIX):
        if not directory:
            return None
        return directory.get(approver[len(ROLE_PREFIX):])
    return approver


def init_form(
    form_type: str,
    payload: dict,
    route: list[RouteStep] | tuple[RouteStep, ...],
    package: FormPackage,
    manifest: Optional[PluginManifest] = None,
) -> RoutedForm:
    if package.form_type != form_type:
        raise SchemaViolation(f"package is for {package.form_type}, not {form_type}")
    package.validate_payload(payload)
    if not route:
        raise SchemaViolation("route must be non-empty")
    return RoutedForm(
        form_type=form_type,
        schema_version=package.schema_version,
        payload=payload,
        route=tuple(route),
        manifest=manifest,
    )


def attach_form(env: Envelope, form: RoutedForm) -> Envelope:
    """Carrying envelope gets the form header and the HAS_FORM flag."""
    return replace(
        env,
        flags=env.flags | {HAS_FORM},
        headers=env.headers + ((FORM_HEADER, form.to_wire()),),
    )


def form_from_envelope(env: Envelope) -> RoutedForm:
    payload = env.header(FORM_HEADER)
    if payload is None:
        raise SchemaViolation("envelope carries no form")
    return RoutedForm.from_wire(payload)


def _authorized(
    signer: str,
    step: RouteStep,
    principal: Optional[str],
    form_type: str,
    rules: tuple[DelegationRule, ...],
) -> bool:
    if principal is None:
        return False
    if signer == principal:
        return True
    if signer in step.delegates:
        return True
    return any(r.matches(principal, signer, form_type) for r in rules)


def sign_off(
    form: RoutedForm,
    key: SigningKey,
    signer: str,
    rules: tuple[DelegationRule, ...] = (),
    directory: dict[str, str] | None = None,
    expected_key_id: str | None = None,
    signed_at: int | None = None,
) -> RoutedForm:
    """Append one approval for the current route step."""
    if form.complete:
        raise NotYourTurn("route already fully approved")
    step = form.route[form.next_step_index]
    principal = resolve_approver(step.approver, directory)
    if not _authorized(signer, step, principal, form.form_type, rules):
        raise NotYourTurn(f"{signer} may not satisfy step {form.next_step_index}")
    if expected_key_id is not None and key.public.key_id != expected_key_id:
        from .errors import KeyMismatch

        raise KeyMismatch(signer)
    data = signed_prefix_bytes(form, len(form.approvals))
    block = SignatureBlock(
        signer=signer,
        role=APPROVER,
        key_id=key.public.key_id,
        algorithm=key.algorithm,
        signed_at=signed_at if signed_at is not None else now_ms(),
        signature=key.sign(data),
    )
    return replace(form, approvals=form.approvals + (Approval(block, principal),))


@dataclass(frozen=True)
class AuditReport:
    approval_states: tuple[str, ...]  # VALID / INVALID / UNKNOWN_KEY
    route_conformance: tuple[bool, ...]  # per approval
    steps_covered: bool
    approved: bool

    def to_wire(self) -> dict:
        return {
            "approval_states": list(self.approval_states),
            "route_conformance": list(self.route_conformance),
            "steps_covered": self.steps_covered,
            "approved": self.approved,
        }


def verify_chain(
    form: RoutedForm,
    trust,
    rules: tuple[DelegationRule, ...] = (),
    directory: dict[str, str] | None = None,
) -> AuditReport:
    """Third-party audit: per-approval signature validity plus route
    conformance (each approval matches its step or a delegation)."""
    states: list[str] = []
    conformance: list[bool] = []
    for i, approval in enumerate(form.approvals):
        block = approval.block
        resolved = trust.resolve_key(block.key_id)
        if resolved is None:
            states.append(UNKNOWN_KEY)
        elif block.role == APPROVER and resolved.key.verify(
            block.signature, signed_prefix_bytes(form, i)
        ):
            states.append(VALID)
        else:
            states.append(INVALID)
        if i >= len(form.route):
            conformance.append(False)
            continue
        step = form.route[i]
        principal = resolve_approver(step.approver, directory)
        conformance.append(
            principal is not None
            and approval.principal == principal
            and _authorized(block.signer, step, principal, form.form_type, rules)
        )
    steps_covered = len(form.approvals) == len(form.route)
    approved = (
        steps_covered
        and all(s == VALID for s in states)
        and all(conformance)
    )
    return AuditReport(tuple(states), tuple(conformance), steps_covered, approved)


# ------------------------------------------------------------- auto-routing

_OPS = {
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    "<": lambda a, b: a < b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def _rule_fires(rule: dict, fields: dict) -> bool:
    condition = rule.get("condition")
    if not isinstance(condition, dict):
        raise RuleError(f"rule {rule.get('name')}: missing condition")
    try:
        field_name = condition["field"]
        op = _OPS[condition["op"]]
        value = condition["value"]
    except KeyError as exc:
        raise RuleError(f"rule {rule.get('name')}: malformed condition") from exc
    if field_name not in fields:
        return False
    try:
        return bool(op(fields[field_name], value))
    except TypeError as exc:
        raise RuleError(f"rule {rule.get('name')}: incomparable types") from exc


def auto_route(
    form: RoutedForm,
    rules: list[dict],
    directory: dict[str, str] | None = None,
    computed: dict | None = None,
) -> tuple[RoutedForm, Optional[str]]:
    """Server-side routing decision after an approval.

    Rules are dicts: {name, priority, condition: {field, op, value},
    insert_approver}. The firing rule with the lowest priority (name as
    bytewise tiebreak) inserts a step before the current next step; at
    most one rule applies per call and a rule never fires twice on the
    same form. Returns (possibly modified form, next approver address).
    """
    fields = dict(form.payload)
    if computed:
        fields.update(computed)
    fired = []
    for rule in rules:
        if "name" not in rule or "insert_approver" not in rule:
            raise RuleError("rule missing name or insert_approver")
        if _rule_fires(rule, fields):
            fired.append(rule)
    fired.sort(key=lambda r: (r.get("priority", 0), r["name"].encode("utf-8")))
    out = form
    if fired:
        winner = fired[0]
        insert_at = out.next_step_index
        already = any(s.approver == winner["insert_approver"] for s in out.route)
        if not already:
            new_route = (
                out.route[:insert_at]
                + (RouteStep(winner["insert_approver"]),)
                + out.route[insert_at:]
            )
            out = replace(out, route=new_route)
    if out.complete:
        return out, None
    return out, resolve_approver(out.route[out.next_step_index].approver, directory)
