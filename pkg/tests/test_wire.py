"""Multipart parsing edge cases."""

import pytest
import requests

from burstq.errors import MalformedPayload
from burstq.wire import bearer_token, parse_multipart


def encode(parts):
    """Build a multipart body with requests' encoder."""
    body, content_type = requests.models.RequestEncodingMixin._encode_files(
        parts, None
    )
    return content_type, body


class TestParseMultipart:
    def test_fields_and_files_split(self):
        content_type, body = encode(
            [("type", (None, "sleep")), ("geno.csv", ("geno.csv", b"0,1\n"))]
        )
        fields, files = parse_multipart(content_type, body)
        assert fields == {"type": "sleep"}
        assert files == {"geno.csv": b"0,1\n"}

    def test_duplicate_field_rejected(self):
        content_type, body = encode(
            [("type", (None, "sleep")), ("type", (None, "regression-scan"))]
        )
        with pytest.raises(MalformedPayload, match="duplicate field 'type'"):
            parse_multipart(content_type, body)

    def test_duplicate_file_part_rejected(self):
        content_type, body = encode(
            [("a.txt", ("a.txt", b"1")), ("a.txt", ("a.txt", b"2"))]
        )
        with pytest.raises(MalformedPayload, match="duplicate file part"):
            parse_multipart(content_type, body)

    def test_non_multipart_rejected(self):
        with pytest.raises(MalformedPayload):
            parse_multipart("application/json", b"{}")

    def test_binary_file_content_round_trips(self):
        payload = bytes(range(256))
        content_type, body = encode([("blob.bin", ("blob.bin", payload))])
        _, files = parse_multipart(content_type, body)
        assert files["blob.bin"] == payload


class TestBearerToken:
    def test_extracts_token(self):
        assert bearer_token("Bearer abc123") == "abc123"

    def test_case_insensitive_scheme(self):
        assert bearer_token("bearer xyz") == "xyz"

    @pytest.mark.parametrize("header", [None, "", "Basic dXNlcg==", "Bearer"])
    def test_rejects_non_bearer(self, header):
        assert bearer_token(header) is None
