"""Independent workflow-chain verifier, written before the main
implementation was wired up. Uses the reference serializer and raw
cryptography primitives; shares no verification code with wsmail.forms.
"""

from __future__ import annotations

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from reference_serializer import reference_encode


def _approval_wire(approval):
    b = approval.block
    import base64

    return {
        "signature": {
            "signer": b.signer,
            "role": b.role,
            "key_id": b.key_id,
            "algorithm": b.algorithm,
            "signed_at": b.signed_at,
            "sig": base64.b64encode(b.signature).decode("ascii"),
        },
        "principal": approval.principal,
    }


def _prefix_bytes(form, count):
    return reference_encode(
        {
            "routed_form": {
                "form_type": form.form_type,
                "schema_version": form.schema_version,
                "payload": form.payload,
                "route": [
                    {"approver": s.approver, "delegates": sorted(s.delegates)}
                    for s in form.route
                ],
                "approvals": [_approval_wire(a) for a in form.approvals[:count]],
            }
        }
    )


def _resolve(approver, directory):
    if approver.startswith("role:"):
        return (directory or {}).get(approver[5:])
    return approver


def _may_sign(signer, step, principal, form_type, rules):
    if principal is None:
        return False
    if signer == principal or signer in step.delegates:
        return True
    for rule in rules:
        if (
            rule.principal == principal
            and signer in rule.delegates
            and rule.scope in ("*", form_type)
        ):
            return True
    return False


def reference_verify(form, raw_keys_by_id, rules=(), directory=None):
    """Returns (approved, per-approval signature validity list).

    raw_keys_by_id: key_id -> raw 32-byte Ed25519 public key.
    """
    valid = []
    conformant = []
    for i, approval in enumerate(form.approvals):
        block = approval.block
        raw = raw_keys_by_id.get(block.key_id)
        ok = False
        if raw is not None and block.role == "APPROVER":
            try:
                Ed25519PublicKey.from_public_bytes(raw).verify(
                    block.signature, _prefix_bytes(form, i)
                )
                ok = True
            except InvalidSignature:
                ok = False
        valid.append(ok)
        if i >= len(form.route):
            conformant.append(False)
            continue
        step = form.route[i]
        principal = _resolve(step.approver, directory)
        conformant.append(
            principal is not None
            and approval.principal == principal
            and _may_sign(block.signer, step, principal, form.form_type, rules)
        )
    approved = (
        len(form.approvals) == len(form.route)
        and all(valid)
        and all(conformant)
    )
    return approved, valid
