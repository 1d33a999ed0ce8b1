"""Job manager: submission, status, results intake and cancellation.

This is the application core behind the HTTP API. Request handlers are
short-lived and share no state with each other; everything durable lives
in the store, everything on disk under ``data_dir/jobs/<id>/``.

Result pushes from agents are idempotent: a bundle is fingerprinted and a
replayed identical push on a terminal job is acknowledged without any
state change, while a *different* payload for a terminal job is rejected
as conflicting (the shape a late push takes after a cancellation).
"""

from __future__ import annotations

import hashlib
import hmac
import io
import logging
import tarfile
import tempfile
import threading
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

from .errors import (
    AuthFailure,
    ConflictingResults,
    DeriveSourceNotReady,
    IllegalTransition,
    NoResults,
    NotFound,
    NotReady,
    OversizeRejected,
    ValidationError,
)
from .kernels import load_genotypes, load_phenotypes
from .model import (
    Backend,
    DatasetProfile,
    JobEvent,
    JobKind,
    JobRecord,
    JobSpec,
    JobState,
    RoutingConfig,
    is_terminal,
    route,
)
from .runtime import Runtime
from .store import Store

log = logging.getLogger("burstq.manager")


def bundle_digest(exit_status: str, outputs: dict[str, bytes], log_text: str) -> str:
    h = hashlib.sha256()
    h.update(exit_status.encode())
    h.update(log_text.encode())
    for name in sorted(outputs):
        h.update(name.encode())
        h.update(hashlib.sha256(outputs[name]).digest())
    return h.hexdigest()


class JobService:
    def __init__(
        self,
        store: Store,
        runtime: Runtime,
        data_dir: str | Path,
        routing: RoutingConfig = RoutingConfig(),
        max_upload_bytes: int = 256 * 1024 * 1024,
    ) -> None:
        self.store = store
        self.runtime = runtime
        self.jobs_dir = Path(data_dir) / "jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self.routing = routing
        self.max_upload_bytes = max_upload_bytes
        self._results_lock = threading.Lock()
        # Wired up by the service assembly; all optional and best-effort.
        self.release_vm: Optional[Callable[[str], None]] = None
        self.abort_backend: dict[Backend, Callable[[JobRecord], None]] = {}
        self.on_enqueue: Optional[Callable[[JobRecord], None]] = None
        self.accounting_view: Optional[Callable[[], dict]] = None

    # ------------------------------------------------------------------
    # submission

    def submit(
        self,
        kind: str,
        params: Optional[dict[str, str]] = None,
        files: Optional[dict[str, bytes]] = None,
        backend_override: Optional[str] = None,
        derive_from: Optional[str] = None,
        owner: str = "anonymous",
    ) -> str:
        params = {str(k): str(v) for k, v in (params or {}).items()}
        files = dict(files or {})

        try:
            job_kind = JobKind(kind)
        except ValueError:
            raise ValidationError(f"unknown job type {kind!r}") from None
        override = None
        if backend_override:
            try:
                override = Backend(backend_override)
            except ValueError:
                raise ValidationError(
                    f"unknown backend {backend_override!r}"
                ) from None

        total_bytes = sum(len(b) for b in files.values())
        if total_bytes > self.max_upload_bytes:
            raise ValidationError(
                f"upload of {total_bytes} bytes exceeds limit {self.max_upload_bytes}"
            )

        derived_files: dict[str, bytes] = {}
        if derive_from:
            try:
                source = self.store.get_job(derive_from)
            except NotFound:
                raise ValidationError(
                    f"derive_from names unknown job {derive_from!r}"
                ) from None
            if source.state is not JobState.COMPLETED:
                raise DeriveSourceNotReady(
                    f"job {derive_from} is {source.state.value}; only Completed "
                    "results can be reused"
                )
            out_dir = self.jobs_dir / derive_from / "outputs"
            if out_dir.exists():
                for p in sorted(out_dir.iterdir()):
                    derived_files[p.name] = p.read_bytes()

        staged = {**derived_files, **files}  # explicit uploads win
        profile = self._build_profile(job_kind, params, staged, total_bytes)
        decision = route(profile, override, self.routing)
        if decision.oversize:
            raise OversizeRejected(
                f"{profile.max_markers} markers exceeds the "
                f"{self.routing.max_marker_capacity}-marker capacity of every "
                "available tier"
            )

        job_id = self.store.next_job_id()
        in_dir = self.jobs_dir / job_id / "inputs"
        in_dir.mkdir(parents=True, exist_ok=True)
        (self.jobs_dir / job_id / "outputs").mkdir(parents=True, exist_ok=True)
        for name, data in staged.items():
            if "/" in name or name.startswith("."):
                raise ValidationError(f"illegal input file name {name!r}")
            (in_dir / name).write_bytes(data)

        record = JobRecord(
            id=job_id,
            spec=JobSpec(
                kind=job_kind,
                params=params,
                input_names=tuple(sorted(staged)),
                profile=profile,
                backend_override=override,
                derive_from=derive_from,
                owner=owner,
            ),
            state=JobState.QUEUED,
            backend=decision.backend,
            submitted_at=self.runtime.now(),
            est_memory_gb=decision.est_memory_gb,
            core_group=decision.core_group,
        )
        self.store.enqueue(record)
        log.info(
            "accepted %s: %s -> %s (%.1f GB, %d core(s))",
            job_id,
            job_kind.value,
            decision.backend.value,
            decision.est_memory_gb,
            decision.core_group,
        )
        if self.on_enqueue:
            self.on_enqueue(record)
        return job_id

    def _build_profile(
        self,
        kind: JobKind,
        params: dict[str, str],
        staged: dict[str, bytes],
        total_bytes: int,
    ) -> DatasetProfile:
        markers = samples = None
        if "markers" in params:
            markers = int(params["markers"])
        if "samples" in params:
            samples = int(params["samples"])

        if kind is JobKind.REGRESSION_SCAN:
            missing = {"geno.csv", "pheno.csv"} - set(staged)
            if missing:
                raise ValidationError(
                    f"regression-scan requires input(s): {', '.join(sorted(missing))}"
                )
            try:
                with tempfile.TemporaryDirectory() as td:
                    g = Path(td) / "geno.csv"
                    p = Path(td) / "pheno.csv"
                    g.write_bytes(staged["geno.csv"])
                    p.write_bytes(staged["pheno.csv"])
                    geno = load_genotypes(g)
                    pheno = load_phenotypes(p)
            except (ValueError, OSError) as exc:
                raise ValidationError(f"could not parse inputs: {exc}") from exc
            n, m = geno.shape
            if pheno.shape[0] != n:
                raise ValidationError(
                    f"phenotype count {pheno.shape[0]} != genotype rows {n}"
                )
            if n < 3:
                raise ValidationError(
                    "regression-scan needs at least 3 samples (F statistic "
                    "denominator requires n-2 >= 1)"
                )
            markers = markers or m
            samples = samples or n
        return DatasetProfile(
            max_markers=markers or 1,
            sample_size=samples or 1,
            input_bytes=total_bytes,
        )

    # ------------------------------------------------------------------
    # queries

    def status_doc(self, job: JobRecord) -> dict:
        now = self.runtime.now()
        runtime_s = job.runtime_seconds
        if runtime_s is None and job.started_at is not None:
            runtime_s = now - job.started_at
        return {
            "id": job.id,
            "kind": job.spec.kind.value,
            "state": job.state.value,
            "backend": job.backend.value,
            "color": job.color,
            "owner": job.spec.owner,
            "submitted_at": job.submitted_at,
            "started_at": job.started_at,
            "finished_at": job.finished_at,
            "runtime_seconds": runtime_s,
            "error": job.error,
            "attempt_count": job.attempt_count,
            "assigned_vm": job.assigned_vm,
            "est_memory_gb": job.est_memory_gb,
            "core_group": job.core_group,
            "derive_from": job.spec.derive_from,
        }

    def get_status(self, job_id: str) -> dict:
        return self.status_doc(self.store.get_job(job_id))

    def list_jobs(
        self, state: Optional[str] = None, backend: Optional[str] = None
    ) -> list[dict]:
        st = JobState(state) if state else None
        be = Backend(backend) if backend else None
        return [self.status_doc(j) for j in self.store.list_jobs(state=st, backend=be)]

    def list_vms(self) -> list[dict]:
        now = self.runtime.now()
        out = []
        for vm in self.store.vm_list():
            out.append(
                {
                    "id": vm.id,
                    "state": vm.state.value,
                    "endpoint": vm.endpoint,
                    "launched_at": vm.launched_at,
                    "uptime_seconds": (vm.terminated_at or now) - vm.launched_at,
                    "jobs_executed": vm.jobs_executed,
                    "idle_since": vm.idle_since,
                }
            )
        return out

    def accounting(self) -> dict:
        if self.accounting_view:
            return self.accounting_view()
        return {"vms": [], "jobs": [], "total_periods": 0, "total_cost": 0.0}

    # ------------------------------------------------------------------
    # results

    def receive_results(
        self,
        job_id: str,
        token_secret: str,
        exit_status: str,
        outputs: dict[str, bytes],
        log_text: str,
    ) -> str:
        """Ingest a result push. Returns "completed", "failed" or "duplicate"."""
        if exit_status not in ("ok", "error"):
            raise ValidationError(f"exit_status must be ok|error, got {exit_status!r}")
        if exit_status == "error" and not log_text:
            raise ValidationError("error results must carry a log")

        with self._results_lock:
            job = self.store.get_job(job_id)
            self._check_push_token(job, token_secret)
            digest = bundle_digest(exit_status, outputs, log_text)

            if is_terminal(job.state):
                if job.result_digest == digest:
                    self.store.append_note(
                        "JobManager", f"duplicate result push for {job_id} acknowledged"
                    )
                    return "duplicate"
                raise ConflictingResults(
                    f"job {job_id} is already {job.state.value} with different results"
                )
            if job.state is not JobState.RUNNING:
                raise NotReady(f"job {job_id} is {job.state.value}, not Running")

            out_dir = self.jobs_dir / job_id / "outputs"
            out_dir.mkdir(parents=True, exist_ok=True)
            for name, data in outputs.items():
                if "/" in name or name.startswith("."):
                    raise ValidationError(f"illegal output file name {name!r}")
                (out_dir / name).write_bytes(data)

            event = JobEvent.RESULTS_RECEIVED if exit_status == "ok" else JobEvent.FAIL
            now = self.runtime.now()

            def mutate(j: JobRecord) -> JobRecord:
                j = j.apply_event(event, now)
                return replace(
                    j,
                    result_ref=str(out_dir),
                    result_digest=digest,
                    error=(None if exit_status == "ok" else _log_tail(log_text)),
                )

            job = self.store.update_job(
                job_id, mutate, "JobManager", f"results received for {job_id}"
            )

        if job.assigned_vm and self.release_vm:
            self.release_vm(job.assigned_vm)
        return "completed" if exit_status == "ok" else "failed"

    def _check_push_token(self, job: JobRecord, token_secret: str) -> None:
        if not job.assigned_vm:
            raise AuthFailure(f"job {job.id} has no assigned VM")
        vm = self.store.get_vm(job.assigned_vm)
        if not token_secret or not hmac.compare_digest(
            vm.token_secret, token_secret
        ):
            raise AuthFailure("push token does not match the assigned VM")

    def fetch_results(self, job_id: str) -> bytes:
        """Tar archive of every output file, bit-exact."""
        job = self.store.get_job(job_id)
        if job.state in (JobState.FAILED, JobState.CANCELLED):
            raise NoResults(f"job {job_id} is {job.state.value}")
        if job.state is not JobState.COMPLETED:
            raise NotReady(f"job {job_id} is {job.state.value}")
        out_dir = self.jobs_dir / job_id / "outputs"
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w") as tar:
            for p in sorted(out_dir.iterdir()):
                info = tarfile.TarInfo(name=p.name)
                data = p.read_bytes()
                info.size = len(data)
                info.mtime = int(job.finished_at or 0)
                tar.addfile(info, io.BytesIO(data))
        return buf.getvalue()

    # ------------------------------------------------------------------
    # cancellation

    def cancel(self, job_id: str) -> str:
        """Cancel a job; terminal jobs are a no-op returning their state."""
        job = self.store.get_job(job_id)
        if is_terminal(job.state):
            return job.state.value

        was_running = job.state is JobState.RUNNING
        if was_running:
            hook = self.abort_backend.get(job.backend)
            if hook:
                try:
                    hook(job)
                except Exception as exc:
                    log.warning("abort signal for %s failed: %s", job_id, exc)

        now = self.runtime.now()
        try:
            job = self.store.update_job(
                job_id,
                lambda j: j.apply_event(JobEvent.CANCEL, now),
                "JobManager",
                f"cancel {job_id}",
            )
        except IllegalTransition:
            return self.store.get_job(job_id).state.value  # raced to terminal

        if was_running and job.backend is Backend.CLOUD and job.assigned_vm:
            if self.release_vm:
                self.release_vm(job.assigned_vm)
        return job.state.value


def _log_tail(text: str, limit: int = 500) -> str:
    return text[-limit:] if len(text) > limit else text
