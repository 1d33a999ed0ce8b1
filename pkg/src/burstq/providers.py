"""Cloud provider interface and the simulated provider.

The provider is the portable subset of an EC2-style API: launch an image,
terminate a handle, describe its lifecycle state. It executes requests and
keeps a registry of instances; all scheduling policy lives in the pool
manager, never here.

``SimCloud`` implements the interface in-process. Agents are spawned
either as real HTTP servers on loopback ports (live mode) or as direct
in-process objects (virtual transport for the deterministic simulator).
Boot delay and launch-failure probability are configurable and drawn from
a seeded RNG.
"""

from __future__ import annotations

import itertools
import json
import random
import threading
from dataclasses import dataclass
from typing import Optional

import requests

from .agent import AgentCore, AgentHttpServer, PushTransport, http_push_transport
from .errors import ConfigError
from .runtime import Runtime


class AgentUnreachable(Exception):
    """Transport-level failure talking to an agent."""


class VmClient:
    """Per-instance handle the pool uses to talk to one agent."""

    def execute(
        self,
        job_id: str,
        kind: str,
        params: dict[str, str],
        inputs: dict[str, bytes],
        callback_url: str,
        token: str,
    ) -> str:
        raise NotImplementedError

    def status(self) -> dict:
        raise NotImplementedError

    def abort(self, job_id: str) -> None:
        raise NotImplementedError


class HttpVmClient(VmClient):
    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def execute(self, job_id, kind, params, inputs, callback_url, token) -> str:
        try:
            resp = requests.post(
                f"{self.endpoint}/execute",
                data={
                    "job_id": job_id,
                    "kind": kind,
                    "params": json.dumps(params),
                    "callback_url": callback_url,
                    "token": token,
                },
                files={name: (name, data) for name, data in inputs.items()}
                or {"_": ("_", b"")},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise AgentUnreachable(str(exc)) from exc
        if resp.status_code == 409:
            return "busy"
        if 200 <= resp.status_code < 300:
            return "accepted"
        raise AgentUnreachable(f"agent returned {resp.status_code}")

    def status(self) -> dict:
        try:
            resp = requests.get(f"{self.endpoint}/status", timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except requests.RequestException as exc:
            raise AgentUnreachable(str(exc)) from exc

    def abort(self, job_id: str) -> None:
        try:
            requests.post(
                f"{self.endpoint}/abort", json={"job_id": job_id}, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise AgentUnreachable(str(exc)) from exc


class DirectVmClient(VmClient):
    """Virtual transport used by the simulator: plain method calls."""

    def __init__(self, entry: "_SimInstance"):
        self._entry = entry

    def _core(self) -> AgentCore:
        if self._entry.state != "running" or self._entry.core is None:
            raise AgentUnreachable(f"instance {self._entry.handle} is {self._entry.state}")
        return self._entry.core

    def execute(self, job_id, kind, params, inputs, callback_url, token) -> str:
        return self._core().execute(job_id, kind, params, inputs, callback_url, token)

    def status(self) -> dict:
        return self._core().status()

    def abort(self, job_id: str) -> None:
        self._core().abort(job_id)


class Provider:
    """Launch/terminate/describe; terminate is idempotent."""

    def launch(self, image_ref: str, size: str) -> str:
        raise NotImplementedError

    def terminate(self, provider_handle: str) -> None:
        raise NotImplementedError

    def describe(self, provider_handle: str) -> str:
        """One of: pending, running, terminated, error."""
        raise NotImplementedError

    def endpoint(self, provider_handle: str) -> Optional[str]:
        raise NotImplementedError

    def client_for(self, provider_handle: str) -> VmClient:
        raise NotImplementedError


@dataclass
class _SimInstance:
    handle: str
    state: str = "pending"  # pending | running | terminated | error
    core: Optional[AgentCore] = None
    server: Optional[AgentHttpServer] = None
    boot_handle: object = None


class SimCloud(Provider):
    """In-process test cloud.

    ``transport="http"`` spawns each agent as a loopback HTTP server;
    ``transport="direct"`` keeps agents as in-process objects reached by
    direct calls (deterministic, no sockets).
    """

    def __init__(
        self,
        runtime: Runtime,
        transport: str = "http",
        boot_delay: float = 0.0,
        boot_jitter: float = 0.0,
        launch_failure_rate: float = 0.0,
        seed: int = 0,
        push_transport: PushTransport = http_push_transport,
        workdir: Optional[str] = None,
    ) -> None:
        if transport not in ("http", "direct"):
            raise ConfigError(f"unknown SimCloud transport {transport!r}")
        self._runtime = runtime
        self._transport = transport
        self._boot_delay = boot_delay
        self._boot_jitter = boot_jitter
        self._failure_rate = launch_failure_rate
        self._rng = random.Random(seed)
        self._push = push_transport
        self._workdir = workdir
        self._seq = itertools.count(1)
        self._instances: dict[str, _SimInstance] = {}
        self._lock = threading.Lock()

    def launch(self, image_ref: str, size: str) -> str:
        with self._lock:
            handle = f"i-{next(self._seq):04d}"
            entry = _SimInstance(handle=handle)
            self._instances[handle] = entry
        delay = self._boot_delay
        if self._boot_jitter > 0:
            delay += self._rng.uniform(0, self._boot_jitter)
        will_fail = self._rng.random() < self._failure_rate
        entry.boot_handle = self._runtime.schedule(
            delay, lambda: self._finish_boot(entry, will_fail)
        )
        return handle

    def _finish_boot(self, entry: _SimInstance, will_fail: bool) -> None:
        with self._lock:
            if entry.state != "pending":
                return  # terminated while booting
            if will_fail:
                entry.state = "error"
                return
            core = AgentCore(
                runtime=self._runtime,
                push_transport=self._push,
                workdir=self._workdir,
                name=entry.handle,
            )
            entry.core = core
            if self._transport == "http":
                entry.server = AgentHttpServer(core).start()
            entry.state = "running"

    def terminate(self, provider_handle: str) -> None:
        with self._lock:
            entry = self._instances.get(provider_handle)
            if entry is None or entry.state == "terminated":
                return
            if entry.server is not None:
                entry.server.stop()
                entry.server = None
            entry.core = None
            entry.state = "terminated"

    def describe(self, provider_handle: str) -> str:
        with self._lock:
            entry = self._instances.get(provider_handle)
            return entry.state if entry else "terminated"

    def endpoint(self, provider_handle: str) -> Optional[str]:
        with self._lock:
            entry = self._instances.get(provider_handle)
            if entry is None or entry.state != "running":
                return None
            if entry.server is not None:
                return entry.server.url
            return f"sim://{provider_handle}"

    def client_for(self, provider_handle: str) -> VmClient:
        with self._lock:
            entry = self._instances.get(provider_handle)
        if entry is None:
            raise AgentUnreachable(f"unknown instance {provider_handle}")
        if self._transport == "direct":
            return DirectVmClient(entry)
        url = self.endpoint(provider_handle)
        if url is None:
            raise AgentUnreachable(f"instance {provider_handle} has no endpoint")
        return HttpVmClient(url)

    # test/inspection helpers
    def instance_count(self, state: Optional[str] = None) -> int:
        with self._lock:
            return sum(
                1 for e in self._instances.values() if state is None or e.state == state
            )


class ExternalStubProvider(Provider):
    """Placeholder for a real cloud API client; refuses to launch."""

    def launch(self, image_ref: str, size: str) -> str:
        raise ConfigError(
            "external provider selected but no client is configured; "
            "use provider=sim or supply a real Provider implementation"
        )

    def terminate(self, provider_handle: str) -> None:
        return None

    def describe(self, provider_handle: str) -> str:
        return "terminated"

    def endpoint(self, provider_handle: str) -> Optional[str]:
        return None

    def client_for(self, provider_handle: str) -> VmClient:
        raise AgentUnreachable("external provider stub has no agents")
