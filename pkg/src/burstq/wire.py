"""Multipart/form-data parsing and small HTTP wire helpers.

Parsing rides on the stdlib email parser: the request body is prefixed
with its Content-Type header and read back as a MIME message. Fields are
parts without a filename; files are keyed by part name (falling back to
the filename).
"""

from __future__ import annotations

import email.parser
import email.policy
import json
from typing import Optional

from .errors import MalformedPayload


def parse_multipart(content_type: str, body: bytes) -> tuple[dict[str, str], dict[str, bytes]]:
    """Split a multipart/form-data body into (fields, files).

    Raises MalformedPayload for non-multipart bodies and duplicate part
    names.
    """
    if "multipart/form-data" not in (content_type or ""):
        raise MalformedPayload("expected multipart/form-data")
    header = f"Content-Type: {content_type}\r\nMIME-Version: 1.0\r\n\r\n".encode()
    msg = email.parser.BytesParser(policy=email.policy.HTTP).parsebytes(header + body)
    if not msg.is_multipart():
        raise MalformedPayload("could not parse multipart body")

    fields: dict[str, str] = {}
    files: dict[str, bytes] = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        filename = part.get_filename()
        payload = part.get_payload(decode=True)
        if payload is None:
            payload = b""
        if filename is not None:
            key = name or filename
            if key in files:
                raise MalformedPayload(f"duplicate file part {key!r}")
            files[key] = payload
        else:
            if not name:
                raise MalformedPayload("form field without a name")
            if name in fields:
                raise MalformedPayload(f"duplicate field {name!r}")
            fields[name] = payload.decode("utf-8", errors="replace")
    return fields, files


def bearer_token(auth_header: Optional[str]) -> Optional[str]:
    if not auth_header:
        return None
    scheme, _, value = auth_header.partition(" ")
    if scheme.lower() != "bearer" or not value:
        return None
    return value.strip()


def error_body(code: str, message: str) -> bytes:
    return json.dumps({"error": code, "message": message}).encode()
