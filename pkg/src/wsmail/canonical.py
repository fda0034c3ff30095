"""Canonical deterministic encoding of message values.

The wire model is a restricted JSON value space: null, bool, int, str,
list, dict (string keys). Binary data never appears directly; callers
encode it as base64 text first. Two structurally equal values always
encode to identical bytes: keys are sorted bytewise (UTF-8 order equals
code-point order), integers are base-10 with no leading zeros, strings
are UTF-8 with minimal JSON escaping, and there is no whitespace.

See docs/wire.md for the full format.
"""

from __future__ import annotations

import base64
import json

Value = None | bool | int | str | list | dict


def _check(value) -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise ValueError("floats are not canonical; use integers")
    if isinstance(value, (bytes, bytearray)):
        raise ValueError("raw bytes are not canonical; base64-encode first")
    if isinstance(value, list):
        for item in value:
            _check(item)
        return
    if isinstance(value, dict):
        for key in value:
            if not isinstance(key, str):
                raise ValueError(f"non-string map key: {key!r}")
            _check(value[key])
        return
    raise ValueError(f"unsupported canonical type: {type(value).__name__}")


def encode(value: Value) -> bytes:
    """Deterministic byte encoding of a canonical value."""
    _check(value)
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def encode_text(value: Value) -> str:
    return encode(value).decode("utf-8")


def decode(data: bytes | str) -> Value:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def b64(data: bytes) -> str:
    """RFC 4648 base64, padded, no line breaks."""
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
