"""Legacy scheduling tier: local execution, grid preparation, grid polling.

Two bounded worker pools with distinct responsibilities, mirroring the
original design's reason for having them: placing a job on the remote
queue is slow (seconds for large data), and doing that work inline would
stall request handling when several arrive at once. The local pool runs
small jobs in-process; the preparation pool absorbs the submission latency
for grid-routed jobs. A single polling activity tracks submitted grid jobs
and downloads their output when they finish, are cancelled, or fail.

``SimGrid`` stands in for the remote middleware: submitted jobs wait in a
simulated queue, then run the real kernel (or a synthetic duration for
capacity studies) and hold their outputs for download.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from .errors import ValidationError
from .kernels import kernel_duration, run_kernel
from .model import Backend, JobEvent, JobKind, JobRecord, JobState
from .runtime import Runtime, Scheduled
from .store import Store

log = logging.getLogger("burstq.gridlocal")


@dataclass(frozen=True)
class GridLatencyModel:
    small: float = 1.0
    large: float = 10.0
    size_cutoff_bytes: int = 1 << 20

    def submit_latency(self, input_bytes: int) -> float:
        return self.large if input_bytes >= self.size_cutoff_bytes else self.small


@dataclass(frozen=True)
class LocalSchedulerConfig:
    max_local_jobs: int = 1
    prepare_pool_size: int = 1
    remote_poll_interval: float = 30.0
    latency: GridLatencyModel = GridLatencyModel()
    max_attempts: int = 2
    cores: int = 8

    def __post_init__(self) -> None:
        if not (1 <= self.max_local_jobs <= self.cores - 1):
            raise ValidationError(
                f"max_local_jobs must be in 1..{self.cores - 1} (cores-1)"
            )
        if self.prepare_pool_size < 1:
            raise ValidationError("prepare_pool_size must be >= 1")


class GridSubmitTimeout(Exception):
    pass


@dataclass
class _GridJob:
    remote_id: str
    status: str  # queued | running | finished | cancelled | failed
    outputs: dict[str, bytes] = field(default_factory=dict)
    log_text: str = ""
    run_handle: Optional[Scheduled] = None
    finish_handle: Optional[Scheduled] = None


class SimGrid:
    """In-process grid backend with configurable queue wait."""

    def __init__(
        self,
        runtime: Runtime,
        queue_wait: float = 0.0,
        queue_wait_jitter: float = 0.0,
        submit_timeout_rate: float = 0.0,
        seed: int = 0,
        synthetic_duration: Optional[Callable[[dict], float]] = None,
    ) -> None:
        self._runtime = runtime
        self._queue_wait = queue_wait
        self._jitter = queue_wait_jitter
        self._timeout_rate = submit_timeout_rate
        self._rng = random.Random(seed)
        self._synthetic = synthetic_duration
        self._jobs: dict[str, _GridJob] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self.finished_at: dict[str, float] = {}

    def submit(
        self, kind: JobKind, params: dict[str, str], inputs: dict[str, bytes]
    ) -> str:
        if self._rng.random() < self._timeout_rate:
            raise GridSubmitTimeout("simulated grid submission timeout")
        with self._lock:
            self._seq += 1
            remote_id = f"grid-{self._seq:05d}"
            entry = _GridJob(remote_id=remote_id, status="queued")
            self._jobs[remote_id] = entry
        wait = self._queue_wait
        if self._jitter > 0:
            wait += self._rng.uniform(0, self._jitter)
        entry.run_handle = self._runtime.schedule(
            wait, lambda: self._start(entry, kind, params, inputs)
        )
        return remote_id

    def _start(self, entry: _GridJob, kind, params, inputs) -> None:
        with self._lock:
            if entry.status != "queued":
                return
            entry.status = "running"
        if self._synthetic is not None:
            duration = self._synthetic(params)
        else:
            duration = kernel_duration(kind, params)
        entry.finish_handle = self._runtime.schedule(
            duration, lambda: self._finish(entry, kind, params, inputs)
        )

    def _finish(self, entry: _GridJob, kind, params, inputs) -> None:
        with self._lock:
            if entry.status != "running":
                return
        if self._synthetic is not None:
            result_outputs = {"done.txt": b"synthetic grid run\n"}
            status, log_text = "finished", "synthetic"
        else:
            import tempfile

            with tempfile.TemporaryDirectory(prefix="simgrid-") as td:
                spool = Path(td)
                for name, data in inputs.items():
                    (spool / name).write_bytes(data)
                result = run_kernel(kind, params, spool)
            result_outputs = result.outputs
            status = "finished" if result.ok else "failed"
            log_text = result.log_text
        with self._lock:
            entry.outputs = result_outputs
            entry.log_text = log_text
            entry.status = status
            self.finished_at[entry.remote_id] = self._runtime.now()

    def status(self, remote_id: str) -> str:
        with self._lock:
            return self._jobs[remote_id].status

    def outputs(self, remote_id: str) -> dict[str, bytes]:
        with self._lock:
            return dict(self._jobs[remote_id].outputs)

    def log_text(self, remote_id: str) -> str:
        with self._lock:
            return self._jobs[remote_id].log_text

    def cancel(self, remote_id: str) -> None:
        with self._lock:
            entry = self._jobs.get(remote_id)
            if entry is None or entry.status in ("finished", "cancelled", "failed"):
                return
            if entry.run_handle is not None:
                entry.run_handle.cancel()
            if entry.finish_handle is not None:
                entry.finish_handle.cancel()
            entry.status = "cancelled"


class LocalGridScheduler:
    def __init__(
        self,
        store: Store,
        runtime: Runtime,
        jobs_dir: str | Path,
        grid: SimGrid,
        cfg: LocalSchedulerConfig = LocalSchedulerConfig(),
    ) -> None:
        self.store = store
        self.runtime = runtime
        self.jobs_dir = Path(jobs_dir)
        self.grid = grid
        self.cfg = cfg
        self._lock = threading.RLock()
        self._local_running: dict[str, Scheduled] = {}
        self._preparing: dict[str, Scheduled] = {}
        self._handles: dict[str, str] = {}  # job id -> grid remote id
        self.remote_ids: dict[str, str] = {}  # all-time job -> remote id map
        self.local_trace: list[dict] = []  # start/finish events for tests
        self.grid_completed_at: dict[str, float] = {}

    # ------------------------------------------------------------------
    # local tier

    def tick(self, now: float) -> None:
        """Admit queued local jobs and push grid jobs into preparation."""
        with self._lock:
            self._admit_local(now)
            self._admit_prepare(now)

    def _admit_local(self, now: float) -> None:
        while len(self._local_running) < self.cfg.max_local_jobs:
            job = self.store.next_queued(backend=Backend.LOCAL)
            if job is None:
                return
            job = self.store.update_job(
                job.id,
                lambda j: j.apply_event(JobEvent.DISPATCH, now),
                "Scheduler",
                f"run {job.id} locally",
            )
            duration = kernel_duration(job.spec.kind, job.spec.params)
            self.local_trace.append({"t": now, "event": "start", "job": job.id})
            self._local_running[job.id] = self.runtime.schedule(
                duration, lambda j=job: self._finish_local(j)
            )

    def _finish_local(self, job: JobRecord) -> None:
        workdir = self.jobs_dir / job.id / "inputs"
        workdir.mkdir(parents=True, exist_ok=True)
        result = run_kernel(job.spec.kind, job.spec.params, workdir)
        out_dir = self.jobs_dir / job.id / "outputs"
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in result.outputs.items():
            (out_dir / name).write_bytes(data)
        now = self.runtime.now()
        event = JobEvent.RESULTS_RECEIVED if result.ok else JobEvent.FAIL
        with self._lock:
            if job.id not in self._local_running:
                return  # aborted
            del self._local_running[job.id]
            self.local_trace.append({"t": now, "event": "finish", "job": job.id})
        try:
            self.store.update_job(
                job.id,
                lambda j: replace(
                    j.apply_event(event, now),
                    result_ref=str(out_dir),
                    error=None if result.ok else result.log_text[-500:],
                ),
                "Scheduler",
                f"local {job.id} {'completed' if result.ok else 'failed'}",
            )
        except Exception:
            log.exception("finalizing local job %s", job.id)

    def abort_local(self, job: JobRecord) -> None:
        with self._lock:
            handle = self._local_running.pop(job.id, None)
            if handle is not None:
                handle.cancel()

    # ------------------------------------------------------------------
    # grid preparation

    def _admit_prepare(self, now: float) -> None:
        while len(self._preparing) < self.cfg.prepare_pool_size:
            job = self.store.next_queued(backend=Backend.GRID)
            if job is None:
                return
            job = self.store.update_job(
                job.id,
                lambda j: j.apply_event(JobEvent.PREPARE_REMOTE, now),
                "Scheduler",
                f"preparing {job.id} for grid submission",
            )
            latency = self.cfg.latency.submit_latency(job.spec.profile.input_bytes)
            self._preparing[job.id] = self.runtime.schedule(
                latency, lambda j=job: self._finish_prepare(j)
            )

    def _finish_prepare(self, job: JobRecord) -> None:
        now = self.runtime.now()
        inputs = self._read_inputs(job.id)
        try:
            remote_id = self.grid.submit(job.spec.kind, job.spec.params, inputs)
        except GridSubmitTimeout as exc:
            with self._lock:
                self._preparing.pop(job.id, None)
            new_count = job.attempt_count + 1
            if new_count < self.cfg.max_attempts:
                self.store.requeue_job(job.id, "Scheduler", str(exc))
            else:
                self.store.update_job(
                    job.id,
                    lambda j: replace(
                        j.apply_event(JobEvent.FAIL, now),
                        attempt_count=new_count,
                        error=f"grid submission failed after {new_count} attempt(s)",
                    ),
                    "Scheduler",
                    f"fail {job.id}: grid submission attempts exhausted",
                )
            return
        with self._lock:
            if job.id not in self._preparing:
                # cancelled during preparation; drop the grid-side job too
                self.grid.cancel(remote_id)
                return
            del self._preparing[job.id]
            self._handles[job.id] = remote_id
            self.remote_ids[job.id] = remote_id
        try:
            self.store.update_job(
                job.id,
                lambda j: j.apply_event(JobEvent.DISPATCH, now),
                "Scheduler",
                f"{job.id} submitted to grid as {remote_id}",
            )
        except Exception:
            # raced to terminal (cancelled): retract from the grid list
            with self._lock:
                self._handles.pop(job.id, None)
            self.grid.cancel(remote_id)

    def abort_grid(self, job: JobRecord) -> None:
        with self._lock:
            handle = self._preparing.pop(job.id, None)
            if handle is not None:
                handle.cancel()
            remote_id = self._handles.get(job.id)
        if remote_id is not None:
            self.grid.cancel(remote_id)

    def _read_inputs(self, job_id: str) -> dict[str, bytes]:
        in_dir = self.jobs_dir / job_id / "inputs"
        if not in_dir.exists():
            return {}
        return {p.name: p.read_bytes() for p in sorted(in_dir.iterdir())}

    # ------------------------------------------------------------------
    # grid polling

    def remote_poll_tick(self, now: float) -> list[dict]:
        """Refresh every tracked grid job; finalize the terminal ones."""
        actions: list[dict] = []
        with self._lock:
            tracked = dict(self._handles)
        for job_id, remote_id in tracked.items():
            status = self.grid.status(remote_id)
            if status in ("queued", "running"):
                continue
            with self._lock:
                self._handles.pop(job_id, None)
            job = self.store.get_job(job_id)
            if job.state in (JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED):
                continue  # already finalized (e.g. cancel path)
            if status == "finished":
                out_dir = self.jobs_dir / job_id / "outputs"
                out_dir.mkdir(parents=True, exist_ok=True)
                for name, data in self.grid.outputs(remote_id).items():
                    (out_dir / name).write_bytes(data)
                self.store.update_job(
                    job_id,
                    lambda j, od=out_dir: replace(
                        j.apply_event(JobEvent.RESULTS_RECEIVED, now),
                        result_ref=str(od),
                    ),
                    "Scheduler",
                    f"grid outputs downloaded for {job_id}",
                )
                self.grid_completed_at[job_id] = now
            elif status == "failed":
                self.store.update_job(
                    job_id,
                    lambda j: replace(
                        j.apply_event(JobEvent.FAIL, now),
                        error=self.grid.log_text(remote_id)[-500:] or "grid job failed",
                    ),
                    "Scheduler",
                    f"grid job {job_id} failed",
                )
            else:  # cancelled
                try:
                    self.store.update_job(
                        job_id,
                        lambda j: j.apply_event(JobEvent.CANCEL, now),
                        "Scheduler",
                        f"grid job {job_id} cancelled",
                    )
                except Exception:
                    pass
            actions.append({"t": now, "job": job_id, "grid_status": status})
        return actions

    # ------------------------------------------------------------------

    def tracked_remote_jobs(self) -> dict[str, str]:
        with self._lock:
            return dict(self._handles)

    def stop(self) -> None:
        with self._lock:
            for handle in list(self._local_running.values()):
                handle.cancel()
            for handle in list(self._preparing.values()):
                handle.cancel()
