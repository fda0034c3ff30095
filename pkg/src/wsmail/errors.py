"""Error taxonomy shared across the suite.

Every protocol-visible failure carries a stable string code so RPC
responses, plug-in results, and test assertions can match on it.
"""

from __future__ import annotations


class WsmailError(Exception):
    """Base error with a stable machine-readable code."""

    code = "ERROR"

    def __init__(self, message: str = "", code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(message or self.code)


class InvalidEnvelope(WsmailError):
    code = "INVALID_ENVELOPE"


class KeyMismatch(WsmailError):
    code = "KEY_MISMATCH"


class UnknownUser(WsmailError):
    code = "UNKNOWN_USER"


class MethodMismatch(WsmailError):
    code = "METHOD_MISMATCH"


class UnknownSubject(WsmailError):
    code = "UNKNOWN_SUBJECT"


class AuthFailed(WsmailError):
    code = "AUTH_FAILED"


class NoRoute(WsmailError):
    code = "NO_ROUTE"


class Timeout(WsmailError):
    code = "TIMEOUT"


class ConnectionRefused(WsmailError):
    code = "CONNECTION_REFUSED"


class FrameTooLarge(WsmailError):
    code = "FRAME_TOO_LARGE"


class MalformedFrame(WsmailError):
    code = "MALFORMED_FRAME"


class NotFound(WsmailError):
    code = "NOT_FOUND"


class PermissionDenied(WsmailError):
    code = "PERMISSION_DENIED"


class HashMismatch(WsmailError):
    code = "HASH_MISMATCH"


class DuplicateExtensionId(WsmailError):
    code = "DUPLICATE_EXTENSION_ID"


class UnknownPlugin(WsmailError):
    code = "UNKNOWN_PLUGIN"


class UnknownExtensionId(WsmailError):
    code = "UNKNOWN_EXTENSION_ID"


class PluginFailure(WsmailError):
    code = "PLUGIN_FAILURE"


class BadSignature(WsmailError):
    code = "BAD_SIGNATURE"


class UserDeclined(WsmailError):
    code = "USER_DECLINED"


class FetchFailed(WsmailError):
    code = "FETCH_FAILED"


class SchemaViolation(WsmailError):
    code = "SCHEMA_VIOLATION"


class NotYourTurn(WsmailError):
    code = "NOT_YOUR_TURN"


class RuleError(WsmailError):
    code = "RULE_ERROR"


class StoreFailed(WsmailError):
    code = "STORE_FAILED"


class BadOriginSignature(WsmailError):
    code = "BAD_ORIGIN_SIGNATURE"


class UnknownRecipient(WsmailError):
    code = "UNKNOWN_RECIPIENT"


class PipelineRejected(WsmailError):
    code = "PIPELINE_REJECTED"


class NoClientCert(WsmailError):
    code = "NO_CLIENT_CERT"


class ChannelExpired(WsmailError):
    code = "CHANNEL_EXPIRED"


class Declined(WsmailError):
    code = "DECLINED"


class NotACounterexample(WsmailError):
    code = "NOT_A_COUNTEREXAMPLE"
