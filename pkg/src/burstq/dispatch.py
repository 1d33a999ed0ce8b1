"""Dispatch loop: moves queued cloud jobs onto idle VM agents.

One periodic activity, never re-entered. Each tick walks the cloud queue
in submission order: while an idle VM can be had, the head job is
dispatched; the moment the pool runs dry a demand signal (queue depth plus
oldest wait age) goes to the VM manager and the scan stops - head-of-line
FIFO, no backfilling, since all VMs are the same shape.

Per-job problems are recorded on the job and never abort the loop. Every
step appends to a machine-readable action trace used by tests and the
debug endpoint.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .errors import IllegalTransition, NotFound, ValidationError
from .model import Backend, JobEvent, JobRecord, JobState, VmRecord, is_terminal
from .pool import VmManager
from .providers import AgentUnreachable
from .runtime import Runtime
from .store import Store

log = logging.getLogger("burstq.dispatch")


@dataclass(frozen=True)
class DispatchConfig:
    poll_interval: float = 1.0
    dispatch_timeout: float = 30.0
    max_dispatch_retries: int = 2
    max_attempts: int = 2

    def __post_init__(self) -> None:
        if self.poll_interval <= 0:
            raise ValidationError("poll_interval must be > 0")


class QueueManager:
    def __init__(
        self,
        store: Store,
        pool: VmManager,
        runtime: Runtime,
        jobs_dir: str | Path,
        callback_base: str,
        cfg: DispatchConfig = DispatchConfig(),
        trace_size: int = 2000,
    ) -> None:
        self.store = store
        self.pool = pool
        self.runtime = runtime
        self.jobs_dir = Path(jobs_dir)
        self.callback_base = callback_base.rstrip("/")
        self.cfg = cfg
        self.trace: deque[dict] = deque(maxlen=trace_size)
        pool.on_agent_failure = self.handle_agent_failure

    # ------------------------------------------------------------------

    def tick(self, now: float) -> list[dict]:
        """One dispatch pass; returns the actions taken."""
        actions: list[dict] = []
        while True:
            job = self.store.next_queued(backend=Backend.CLOUD)
            if job is None:
                break
            vm = self.pool.acquire_idle_vm()
            if vm is None:
                depth, oldest_submit = self.store.queued_depth(Backend.CLOUD)
                action = {
                    "t": now,
                    "action": "demand",
                    "depth": depth,
                    "oldest_wait": max(0.0, now - oldest_submit),
                }
                actions.append(action)
                self.trace.append(action)
                self.pool.notify_demand(depth, action["oldest_wait"])
                break
            outcome = self.dispatch(job, vm)
            action = {
                "t": now,
                "action": "dispatch",
                "job": job.id,
                "vm": vm.id,
                "outcome": outcome,
            }
            actions.append(action)
            self.trace.append(action)
        return actions

    # ------------------------------------------------------------------

    def dispatch(self, job: JobRecord, vm: VmRecord) -> str:
        """Send one job to one reserved VM. Outcomes are data, not errors."""
        try:
            client = self.pool.client_for(vm)
        except AgentUnreachable as exc:
            return self._unreachable(job, vm, str(exc))
        inputs = self._read_inputs(job)
        callback_url = f"{self.callback_base}/jobs/{job.id}/results"

        outcome: Optional[str] = None
        last_error = ""
        for _ in range(1 + self.cfg.max_dispatch_retries):
            try:
                outcome = client.execute(
                    job_id=job.id,
                    kind=job.spec.kind.value,
                    params=job.spec.params,
                    inputs=inputs,
                    callback_url=callback_url,
                    token=vm.token_secret,
                )
                break
            except AgentUnreachable as exc:
                last_error = str(exc)
        if outcome is None:
            return self._unreachable(job, vm, last_error)

        if outcome == "busy":
            # Agent-side rejection: pool bookkeeping already shows the VM
            # busy (the reservation), which now matches reality. The job
            # stays queued for the next idle VM.
            log.warning("agent on %s rejected %s as busy", vm.id, job.id)
            return "busy"

        now = self.runtime.now()
        try:
            self.store.update_job(
                job.id,
                lambda j: replace(j.apply_event(JobEvent.DISPATCH, now), assigned_vm=vm.id),
                "QueueManager",
                f"dispatch {job.id} to {vm.id}",
            )
        except IllegalTransition:
            # Cancelled between peek and dispatch: pull it back off the agent.
            try:
                client.abort(job.id)
            except (AgentUnreachable, NotFound):
                pass
            self.pool.release(vm.id)
            return "cancelled"
        log.info("dispatched %s to %s", job.id, vm.id)
        return "accepted"

    def _read_inputs(self, job: JobRecord) -> dict[str, bytes]:
        in_dir = self.jobs_dir / job.id / "inputs"
        if not in_dir.exists():
            return {}
        return {p.name: p.read_bytes() for p in sorted(in_dir.iterdir())}

    def _unreachable(self, job: JobRecord, vm: VmRecord, reason: str) -> str:
        log.warning("vm %s unreachable dispatching %s: %s", vm.id, job.id, reason)
        self.pool.mark_lost(vm.id, f"unreachable during dispatch: {reason}")
        self.store.update_job(
            job.id,
            lambda j: replace(j, attempt_count=j.attempt_count + 1),
            "QueueManager",
            f"dispatch of {job.id} failed: vm unreachable",
        )
        return "unreachable"

    # ------------------------------------------------------------------

    def handle_agent_failure(self, job_id: str, vm_id: str, reason: str) -> None:
        """A VM died (or vanished) while executing a job."""
        job = self.store.get_job(job_id)
        if is_terminal(job.state):
            self.store.append_note(
                "QueueManager",
                f"late failure report for terminal job {job_id} ignored ({reason})",
            )
            return
        self.pool.mark_lost(vm_id, reason)
        if job.state is not JobState.RUNNING or job.assigned_vm != vm_id:
            return
        new_count = job.attempt_count + 1
        if new_count < self.cfg.max_attempts:
            self.store.requeue_job(job_id, "QueueManager", f"agent failure: {reason}")
            log.warning("job %s requeued after agent failure (%s)", job_id, reason)
        else:
            now = self.runtime.now()
            self.store.update_job(
                job_id,
                lambda j: replace(
                    j.apply_event(JobEvent.FAIL, now),
                    attempt_count=new_count,
                    error=f"agent failed after {new_count} attempt(s): {reason}",
                ),
                "QueueManager",
                f"fail {job_id}: attempts exhausted",
            )
            log.error("job %s failed permanently: %s", job_id, reason)

    def dispatch_trace(self) -> list[dict]:
        return list(self.trace)
