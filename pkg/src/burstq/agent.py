"""Single-job execution agent.

Each pool instance runs one of these. The agent accepts exactly one job at
a time over its HTTP interface (or a direct in-process call in simulation),
runs the kernel, and pushes the result bundle back to the job manager with
exponential-backoff retries. Kernel images are preinstalled: the dispatch
payload carries inputs and metadata only, never code.

Push delivery is at-least-once; the manager deduplicates. Retries stop on
a definitive 4xx rejection (revoked token, cancelled job). After retry
exhaustion the agent returns to idle with a fault flag so the pool can see
something went wrong.
"""

from __future__ import annotations

import json
import logging
import tempfile
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

import requests

from .errors import MalformedPayload, NotFound
from .kernels import kernel_duration, run_kernel
from .model import JobKind
from .runtime import Runtime, Scheduled
from .wire import bearer_token, error_body, parse_multipart

log = logging.getLogger("burstq.agent")

PUSH_INITIAL_BACKOFF = 1.0
PUSH_BACKOFF_FACTOR = 2.0
PUSH_BACKOFF_CAP = 60.0
PUSH_MAX_ATTEMPTS = 10


@dataclass
class ResultBundle:
    job_id: str
    exit_status: str
    outputs: dict[str, bytes] = field(default_factory=dict)
    log_text: str = ""


# A push transport delivers a bundle to a callback URL and returns the
# HTTP-style status code; connection-level failures raise.
PushTransport = Callable[[str, str, ResultBundle], int]


def http_push_transport(callback_url: str, token: str, bundle: ResultBundle) -> int:
    resp = requests.post(
        callback_url,
        data={"exit_status": bundle.exit_status, "log": bundle.log_text},
        files={name: (name, data) for name, data in bundle.outputs.items()},
        headers={"Authorization": f"Bearer {token}"},
        timeout=30,
    )
    return resp.status_code


class AgentCore:
    """Execution state machine; transport-agnostic."""

    def __init__(
        self,
        runtime: Runtime,
        push_transport: PushTransport = http_push_transport,
        workdir: Optional[str] = None,
        name: str = "agent",
    ) -> None:
        self._runtime = runtime
        self._push = push_transport
        self._root = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="burstq-agent-"))
        self._root.mkdir(parents=True, exist_ok=True)
        self.name = name
        self._lock = threading.Lock()
        self._mode = "idle"
        self._job_id: Optional[str] = None
        self._pending: Optional[Scheduled] = None
        self._fault: Optional[str] = None
        self._started_at = runtime.now()
        self.push_attempts = 0  # attempts for the most recent bundle

    # ------------------------------------------------------------------

    def execute(
        self,
        job_id: str,
        kind: str,
        params: dict[str, str],
        inputs: dict[str, bytes],
        callback_url: str,
        token: str,
    ) -> str:
        """Accept a job if idle. Returns "accepted" or "busy"."""
        if not job_id or not kind:
            raise MalformedPayload("job_id and kind are required")
        try:
            job_kind = JobKind(kind)
        except ValueError:
            raise MalformedPayload(f"unknown job kind {kind!r}") from None

        with self._lock:
            if self._mode == "busy":
                return "busy"
            self._mode = "busy"
            self._job_id = job_id
            self._fault = None

        workdir = self._root / job_id
        workdir.mkdir(parents=True, exist_ok=True)
        for name, data in inputs.items():
            (workdir / name).write_bytes(data)

        duration = kernel_duration(job_kind, params)
        log.info("%s accepted job %s (%s, %.3fs)", self.name, job_id, kind, duration)
        self._pending = self._runtime.schedule(
            duration,
            lambda: self._finish_kernel(job_id, job_kind, params, workdir, callback_url, token),
        )
        return "accepted"

    def _finish_kernel(
        self,
        job_id: str,
        kind: JobKind,
        params: dict[str, str],
        workdir: Path,
        callback_url: str,
        token: str,
    ) -> None:
        with self._lock:
            if self._job_id != job_id:
                return  # aborted while waiting
            self._pending = None
        result = run_kernel(kind, params, workdir)
        bundle = ResultBundle(
            job_id=job_id,
            exit_status=result.exit_status,
            outputs=result.outputs,
            log_text=result.log_text,
        )
        self.push_attempts = 0
        self._attempt_push(job_id, callback_url, token, bundle, PUSH_INITIAL_BACKOFF)

    def _attempt_push(
        self,
        job_id: str,
        callback_url: str,
        token: str,
        bundle: ResultBundle,
        backoff: float,
    ) -> None:
        with self._lock:
            if self._job_id != job_id:
                return  # aborted mid-retry
        self.push_attempts += 1
        try:
            status = self._push(callback_url, token, bundle)
        except Exception as exc:
            status = None
            log.warning(
                "%s push attempt %d for %s failed: %s",
                self.name,
                self.push_attempts,
                job_id,
                exc,
            )
        if status is not None and 200 <= status < 300:
            log.info(
                "%s delivered results for %s after %d attempt(s)",
                self.name,
                job_id,
                self.push_attempts,
            )
            self._become_idle(job_id, fault=None)
            return
        if status is not None and 400 <= status < 500:
            # Definitive rejection (revoked token, cancelled job): stop.
            self._become_idle(job_id, fault=f"push rejected with {status}")
            return
        if self.push_attempts >= PUSH_MAX_ATTEMPTS:
            self._become_idle(job_id, fault="push retries exhausted")
            return
        with self._lock:
            if self._job_id != job_id:
                return
            self._pending = self._runtime.schedule(
                backoff,
                lambda: self._attempt_push(
                    job_id,
                    callback_url,
                    token,
                    bundle,
                    min(backoff * PUSH_BACKOFF_FACTOR, PUSH_BACKOFF_CAP),
                ),
            )

    def _become_idle(self, job_id: str, fault: Optional[str]) -> None:
        with self._lock:
            if self._job_id != job_id:
                return
            self._mode = "idle"
            self._job_id = None
            self._pending = None
            self._fault = fault
        if fault:
            log.warning("%s idle with fault: %s", self.name, fault)

    # ------------------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            out = {
                "mode": self._mode,
                "uptime": self._runtime.now() - self._started_at,
            }
            if self._job_id:
                out["job_id"] = self._job_id
            if self._fault:
                out["fault"] = self._fault
            return out

    def abort(self, job_id: str) -> None:
        """Stop the matching job without pushing results."""
        with self._lock:
            if self._job_id != job_id:
                raise NotFound(f"agent not executing {job_id}")
            if self._pending is not None:
                self._pending.cancel()
            self._mode = "idle"
            self._job_id = None
            self._pending = None
        log.info("%s aborted job %s", self.name, job_id)


class _AgentHandler(BaseHTTPRequestHandler):
    core: AgentCore  # bound by AgentHttpServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet; the service logs itself
        log.debug("agent http: " + fmt, *args)

    def _reply(self, status: int, payload: bytes, content_type="application/json"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        if self.path == "/status":
            self._reply(200, json.dumps(self.core.status()).encode())
        else:
            self._reply(404, error_body("not_found", self.path))

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            if self.path == "/execute":
                fields, files = parse_multipart(self.headers.get("Content-Type", ""), body)
                params = json.loads(fields.get("params", "{}"))
                outcome = self.core.execute(
                    job_id=fields.get("job_id", ""),
                    kind=fields.get("kind", ""),
                    params={str(k): str(v) for k, v in params.items()},
                    inputs=files,
                    callback_url=fields.get("callback_url", ""),
                    token=bearer_token(self.headers.get("Authorization"))
                    or fields.get("token", ""),
                )
                if outcome == "busy":
                    self._reply(409, json.dumps({"outcome": "busy"}).encode())
                else:
                    self._reply(202, json.dumps({"outcome": "accepted"}).encode())
            elif self.path == "/abort":
                data = json.loads(body or b"{}")
                self.core.abort(data.get("job_id", ""))
                self._reply(200, b"{}")
            else:
                self._reply(404, error_body("not_found", self.path))
        except MalformedPayload as exc:
            self._reply(400, error_body(exc.code, str(exc)))
        except NotFound as exc:
            self._reply(404, error_body(exc.code, str(exc)))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("agent handler error")
            self._reply(500, error_body("internal", str(exc)))


class AgentHttpServer:
    """HTTP front for an AgentCore, bound to a loopback port."""

    def __init__(self, core: AgentCore, host: str = "127.0.0.1", port: int = 0):
        self.core = core
        handler = type("BoundAgentHandler", (_AgentHandler,), {"core": core})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "AgentHttpServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"{self.core.name}-http", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
