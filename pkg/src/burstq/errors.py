"""Exception types shared across the service.

Every error carries a stable machine-readable ``code`` (used by the HTTP
layer and the CLI) and a default HTTP status.
"""

from __future__ import annotations


class BurstqError(Exception):
    code = "internal"
    http_status = 500


class ValidationError(BurstqError):
    code = "validation"
    http_status = 400


class MalformedPayload(ValidationError):
    code = "malformed_payload"
    http_status = 400


class OversizeRejected(ValidationError):
    """Dataset exceeds the marker capacity bound of every available tier."""

    code = "oversize_rejected"
    http_status = 400


class DeriveSourceNotReady(BurstqError):
    code = "derive_source_not_ready"
    http_status = 409


class NotFound(BurstqError):
    code = "not_found"
    http_status = 404


class IllegalTransition(BurstqError):
    code = "illegal_transition"
    http_status = 409

    def __init__(self, state: object, event: object) -> None:
        super().__init__(f"no transition from {state} on {event}")
        self.state = state
        self.event = event


class StorageFailure(BurstqError):
    code = "storage_failure"
    http_status = 500


class AuthFailure(BurstqError):
    code = "auth_failure"
    http_status = 403


class ConflictingResults(BurstqError):
    """A terminal job received a result push with a different payload."""

    code = "conflicting_results"
    http_status = 409


class NotReady(BurstqError):
    code = "not_ready"
    http_status = 409


class NoResults(BurstqError):
    """Terminal job that can never produce a results archive."""

    code = "no_results"
    http_status = 409


class ConfigError(BurstqError):
    code = "config"
    http_status = 500
