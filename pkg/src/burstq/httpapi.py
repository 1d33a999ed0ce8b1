"""HTTP front for the job manager.

Endpoints (JSON unless noted):

* ``POST /jobs`` - multipart/form-data submission; field ``type`` plus
  optional ``params`` (JSON string), ``backend``, ``derive_from``,
  ``owner`` and one part per input file. Returns 201 ``{"id": ...}``.
* ``GET /jobs`` (filters ``?state=&backend=``), ``GET /jobs/{id}``,
  ``DELETE /jobs/{id}``.
* ``GET /jobs/{id}/results`` - tar archive, or 409/404.
* ``POST /jobs/{id}/results`` - multipart push from an agent; fields
  ``exit_status`` and ``log``, one part per output file, bearer token.
* ``GET /vms``, ``GET /accounting``, ``GET /healthz``.
* ``GET /debug/dispatch-trace`` - only when debug endpoints are enabled.

With lockdown enabled, every endpoint except the result push rejects
requests that do not originate from the loopback interface; the push is
instead gated by its per-VM bearer token. Deploy behind a TLS terminator
for transport security.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qs, urlparse

from .errors import BurstqError, ValidationError
from .manager import JobService
from .wire import bearer_token, error_body, parse_multipart

log = logging.getLogger("burstq.http")

LOOPBACK_ADDRESSES = ("127.0.0.1", "::1", "::ffff:127.0.0.1")


def lockdown_allows(method: str, path: str, client_ip: str, lockdown: bool) -> bool:
    """Origin policy: loopback only, except the agent result push."""
    if not lockdown or client_ip in LOOPBACK_ADDRESSES:
        return True
    parts = [p for p in path.split("/") if p]
    return (
        method == "POST"
        and len(parts) == 3
        and parts[0] == "jobs"
        and parts[2] == "results"
    )


class ApiHandler(BaseHTTPRequestHandler):
    service: JobService
    lockdown: bool = True
    debug_endpoints: bool = False
    dispatch_trace: Optional[Callable[[], list]] = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("http: " + fmt, *args)

    # ------------------------------------------------------------------

    def _send(self, status: int, payload: bytes, content_type="application/json"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode())

    def _guard(self) -> bool:
        if lockdown_allows(
            self.command, self.path, self.client_address[0], self.lockdown
        ):
            return True
        self._send(
            403,
            error_body("lockdown", "service only accepts loopback requests"),
        )
        return False

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        if length > self.service.max_upload_bytes:
            raise ValidationError(
                f"request of {length} bytes exceeds limit "
                f"{self.service.max_upload_bytes}"
            )
        return self.rfile.read(length)

    def _handle_errors(self, fn: Callable[[], None]) -> None:
        try:
            fn()
        except BurstqError as exc:
            self._send(exc.http_status, error_body(exc.code, str(exc)))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("handler error")
            self._send(500, error_body("internal", str(exc)))

    # ------------------------------------------------------------------

    def do_GET(self):
        if not self._guard():
            return
        self._handle_errors(self._get)

    def _get(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[0] for k, v in parse_qs(url.query).items()}

        if parts == ["healthz"]:
            self._send_json(200, {"ok": True})
        elif parts == ["jobs"]:
            self._send_json(
                200,
                self.service.list_jobs(
                    state=query.get("state"), backend=query.get("backend")
                ),
            )
        elif len(parts) == 2 and parts[0] == "jobs":
            self._send_json(200, self.service.get_status(parts[1]))
        elif len(parts) == 3 and parts[0] == "jobs" and parts[2] == "results":
            data = self.service.fetch_results(parts[1])
            self._send(200, data, content_type="application/x-tar")
        elif parts == ["vms"]:
            self._send_json(200, self.service.list_vms())
        elif parts == ["accounting"]:
            self._send_json(200, self.service.accounting())
        elif parts == ["debug", "dispatch-trace"] and self.debug_endpoints:
            trace = self.dispatch_trace() if self.dispatch_trace else []
            self._send_json(200, trace)
        else:
            self._send(404, error_body("not_found", url.path))

    def do_POST(self):
        if not self._guard():
            return
        self._handle_errors(self._post)

    def _post(self):
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        if parts == ["jobs"]:
            self._submit()
        elif len(parts) == 3 and parts[0] == "jobs" and parts[2] == "results":
            self._receive_results(parts[1])
        else:
            self._send(404, error_body("not_found", self.path))

    def _submit(self):
        body = self._body()
        fields, files = parse_multipart(self.headers.get("Content-Type", ""), body)
        if "type" not in fields:
            raise ValidationError("submission must carry exactly one 'type' field")
        params = {}
        if fields.get("params"):
            try:
                params = json.loads(fields["params"])
            except json.JSONDecodeError as exc:
                raise ValidationError(f"params is not valid JSON: {exc}") from exc
            if not isinstance(params, dict):
                raise ValidationError("params must be a JSON object")
        job_id = self.service.submit(
            kind=fields["type"],
            params=params,
            files=files,
            backend_override=fields.get("backend") or None,
            derive_from=fields.get("derive_from") or None,
            owner=fields.get("owner") or "anonymous",
        )
        self._send_json(201, {"id": job_id})

    def _receive_results(self, job_id: str):
        token = bearer_token(self.headers.get("Authorization")) or ""
        body = self._body()
        fields, files = parse_multipart(self.headers.get("Content-Type", ""), body)
        outcome = self.service.receive_results(
            job_id,
            token_secret=token,
            exit_status=fields.get("exit_status", ""),
            outputs=files,
            log_text=fields.get("log", ""),
        )
        self._send_json(200, {"outcome": outcome})

    def do_DELETE(self):
        if not self._guard():
            return

        def run():
            parts = [p for p in urlparse(self.path).path.split("/") if p]
            if len(parts) == 2 and parts[0] == "jobs":
                state = self.service.cancel(parts[1])
                self._send_json(200, {"id": parts[1], "state": state})
            else:
                self._send(404, error_body("not_found", self.path))

        self._handle_errors(run)


class ApiServer:
    """Threaded HTTP server wrapping a JobService."""

    def __init__(
        self,
        service: JobService,
        host: str = "127.0.0.1",
        port: int = 0,
        lockdown: bool = True,
        debug_endpoints: bool = False,
        dispatch_trace: Optional[Callable[[], list]] = None,
    ) -> None:
        handler = type(
            "BoundApiHandler",
            (ApiHandler,),
            {
                "service": service,
                "lockdown": lockdown,
                "debug_endpoints": debug_endpoints,
                "dispatch_trace": staticmethod(dispatch_trace) if dispatch_trace else None,
            },
        )
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="burstq-http", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
