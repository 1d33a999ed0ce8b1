"""Durable, serialized-access database of jobs and VMs.

Layout under ``data_dir``:

* ``journal.log`` - append-only log of committed mutations, one JSON object
  per line. Never truncated; it doubles as the audit log. Each entry carries
  the full record after the mutation, so replaying the journal from an empty
  store reproduces the snapshot exactly.
* ``snapshot`` - periodically compacted full state (written on ``compact()``
  and clean ``close()``). On open the snapshot is loaded first and journal
  entries with a higher revision are replayed on top.

Every mutation is appended (and flushed) to the journal *before* it becomes
visible in memory, so a killed process never exposes uncommitted state and
never loses a committed one. All access is funneled through one lock:
exactly one thread touches the data at any given time.

Format: each journal line is ``{"v": 1, "rev": N, "ts": ..., "actor": ...,
"desc": ..., "kind": "job"|"vm", "record": {...}}``. Non-mutating audit
notes use ``"kind": "note"`` and carry no revision of their own. A leading
``format`` byte in the snapshot guards against future layout changes.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional

from .errors import IllegalTransition, NotFound, StorageFailure, ValidationError
from .model import (
    Backend,
    JobEvent,
    JobRecord,
    JobState,
    TERMINAL_STATES,
    VM_ACTIVE_STATES,
    VmRecord,
    VmState,
)

FORMAT_VERSION = 1

ACTORS = ("JobManager", "QueueManager", "VmManager", "Recovery", "Scheduler")


@dataclass(frozen=True)
class AuditEntry:
    revision: int
    actor: str
    description: str
    timestamp: float


@dataclass(frozen=True)
class RecoveryReport:
    requeued: int = 0
    failed: int = 0
    vms_marked_lost: int = 0


class Store:
    """Single-writer job/VM database with journal-based durability."""

    def __init__(
        self,
        data_dir: str | Path,
        clock: Callable[[], float],
        fsync: bool = True,
    ) -> None:
        self._dir = Path(data_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._journal_path = self._dir / "journal.log"
        self._snapshot_path = self._dir / "snapshot"
        self._clock = clock
        self._fsync = fsync
        self._lock = threading.RLock()
        self._jobs: dict[str, JobRecord] = {}
        self._vms: dict[str, VmRecord] = {}
        self._revision = 0
        self._load()
        self._journal = open(self._journal_path, "a", encoding="utf-8")

    # ------------------------------------------------------------------
    # loading / persistence

    def _load(self) -> None:
        if self._snapshot_path.exists():
            with open(self._snapshot_path, encoding="utf-8") as fh:
                snap = json.load(fh)
            if snap.get("format") != FORMAT_VERSION:
                raise StorageFailure(
                    f"unsupported snapshot format {snap.get('format')!r}"
                )
            self._revision = snap["revision"]
            self._jobs = {k: JobRecord.from_dict(v) for k, v in snap["jobs"].items()}
            self._vms = {k: VmRecord.from_dict(v) for k, v in snap["vms"].items()}
        for entry in self._read_journal():
            if entry.get("kind") == "note":
                continue
            if entry["rev"] <= self._revision:
                continue
            if entry["rev"] != self._revision + 1:
                raise StorageFailure(
                    f"journal gap: expected rev {self._revision + 1}, "
                    f"found {entry['rev']}"
                )
            self._apply_entry(entry)
            self._revision = entry["rev"]

    def _read_journal(self) -> Iterator[dict]:
        if not self._journal_path.exists():
            return
        with open(self._journal_path, "rb") as fh:
            lines = fh.read().split(b"\n")
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                # A torn final line is the expected shape of a crash mid-append;
                # anything earlier means real corruption.
                if i == len(lines) - 1 or all(
                    not l.strip() for l in lines[i + 1 :]
                ):
                    return
                raise StorageFailure(f"corrupt journal line {i + 1}")

    def _apply_entry(self, entry: dict) -> None:
        if entry["kind"] == "job":
            rec = JobRecord.from_dict(entry["record"])
            self._jobs[rec.id] = rec
        elif entry["kind"] == "vm":
            rec = VmRecord.from_dict(entry["record"])
            self._vms[rec.id] = rec
        else:
            raise StorageFailure(f"unknown journal entry kind {entry['kind']!r}")

    def _append(self, payload: dict) -> None:
        try:
            self._journal.write(json.dumps(payload, sort_keys=True) + "\n")
            self._journal.flush()
            if self._fsync:
                os.fsync(self._journal.fileno())
        except OSError as exc:
            raise StorageFailure(f"journal append failed: {exc}") from exc

    def _commit(self, kind: str, record, actor: str, description: str) -> None:
        """Durably append, then make the mutation visible. Caller holds lock."""
        self._check_single_execution(record if kind == "job" else None)
        rev = self._revision + 1
        self._append(
            {
                "v": FORMAT_VERSION,
                "rev": rev,
                "ts": self._clock(),
                "actor": actor,
                "desc": description,
                "kind": kind,
                "record": record.to_dict(),
            }
        )
        self._revision = rev
        if kind == "job":
            self._jobs[record.id] = record
        else:
            self._vms[record.id] = record

    def _check_single_execution(self, job: Optional[JobRecord]) -> None:
        # Continuous invariant: no VM ever backs two Running jobs.
        if job is None or job.state is not JobState.RUNNING or not job.assigned_vm:
            return
        for other in self._jobs.values():
            if (
                other.id != job.id
                and other.state is JobState.RUNNING
                and other.assigned_vm == job.assigned_vm
            ):
                raise StorageFailure(
                    f"invariant violated: vm {job.assigned_vm} backs two "
                    f"running jobs ({other.id}, {job.id})"
                )

    def append_note(self, actor: str, description: str) -> None:
        """Durable audit note that does not mutate state or bump the revision."""
        with self._lock:
            self._append(
                {
                    "v": FORMAT_VERSION,
                    "kind": "note",
                    "ts": self._clock(),
                    "actor": actor,
                    "desc": description,
                    "rev": self._revision,
                }
            )

    def compact(self) -> None:
        """Write the snapshot file atomically. The journal stays append-only."""
        with self._lock:
            snap = {
                "format": FORMAT_VERSION,
                "revision": self._revision,
                "jobs": {k: v.to_dict() for k, v in sorted(self._jobs.items())},
                "vms": {k: v.to_dict() for k, v in sorted(self._vms.items())},
            }
            tmp = self._snapshot_path.with_suffix(".tmp")
            try:
                with open(tmp, "w", encoding="utf-8") as fh:
                    json.dump(snap, fh, sort_keys=True)
                    fh.flush()
                    if self._fsync:
                        os.fsync(fh.fileno())
                os.replace(tmp, self._snapshot_path)
            except OSError as exc:
                raise StorageFailure(f"snapshot write failed: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            self.compact()
            self._journal.close()

    # ------------------------------------------------------------------
    # job operations

    def next_job_id(self) -> str:
        with self._lock:
            seq = 1 + max(
                (int(j[1:]) for j in self._jobs if j[1:].isdigit()), default=0
            )
            return f"j{seq:06d}"

    def enqueue(self, record: JobRecord, actor: str = "JobManager") -> str:
        """Durably add a fresh Queued job; returns its id."""
        with self._lock:
            if record.state is not JobState.QUEUED:
                raise ValidationError("enqueue requires state=Queued")
            if not record.id:
                record = replace(record, id=self.next_job_id())
            if record.id in self._jobs:
                raise ValidationError(f"job id {record.id} already exists")
            self._commit("job", record, actor, f"enqueue {record.id}")
            return record.id

    def get_job(self, job_id: str) -> JobRecord:
        with self._lock:
            try:
                return self._jobs[job_id]
            except KeyError:
                raise NotFound(f"job {job_id}") from None

    def list_jobs(
        self,
        state: Optional[JobState] = None,
        backend: Optional[Backend] = None,
    ) -> list[JobRecord]:
        with self._lock:
            out = [
                j
                for j in self._jobs.values()
                if (state is None or j.state is state)
                and (backend is None or j.backend is backend)
            ]
            out.sort(key=lambda j: j.id)
            return out

    def next_queued(self, backend: Optional[Backend] = None) -> Optional[JobRecord]:
        """Peek the oldest Queued job (submission order), without removing it."""
        queued = self.list_jobs(state=JobState.QUEUED, backend=backend)
        return queued[0] if queued else None

    def queued_depth(self, backend: Optional[Backend] = None) -> tuple[int, float]:
        """(count, oldest submitted_at) for the Queued jobs of a backend."""
        queued = self.list_jobs(state=JobState.QUEUED, backend=backend)
        oldest = min((j.submitted_at for j in queued), default=0.0)
        return len(queued), oldest

    def update_job(
        self,
        job_id: str,
        mutation: Callable[[JobRecord], JobRecord],
        actor: str,
        description: str,
    ) -> JobRecord:
        """Apply a pure mutation atomically; exactly one revision per call."""
        with self._lock:
            current = self.get_job(job_id)
            updated = mutation(current)
            if updated.id != current.id:
                raise ValidationError("mutations must not change the record id")
            self._commit("job", updated, actor, description)
            return updated

    def requeue_job(
        self, job_id: str, actor: str, reason: str, bump_attempt: bool = True
    ) -> JobRecord:
        """Reset a non-terminal job to Queued (crash/agent-failure recovery).

        This is bookkeeping outside the lifecycle event alphabet: the
        attempt counter is bumped and any backend assignment cleared.
        """

        def mutate(job: JobRecord) -> JobRecord:
            if job.state in TERMINAL_STATES:
                raise IllegalTransition(job.state.value, "requeue")
            return replace(
                job,
                state=JobState.QUEUED,
                assigned_vm=None,
                started_at=None,
                attempt_count=job.attempt_count + (1 if bump_attempt else 0),
            )

        return self.update_job(job_id, mutate, actor, f"requeue {job_id}: {reason}")

    # ------------------------------------------------------------------
    # vm operations

    def next_vm_id(self) -> str:
        with self._lock:
            seq = 1 + max(
                (int(v[2:]) for v in self._vms if v[2:].isdigit()), default=0
            )
            return f"vm{seq:04d}"

    def vm_upsert(self, record: VmRecord, actor: str = "VmManager", description: str = "") -> None:
        with self._lock:
            self._commit(
                "vm", record, actor, description or f"upsert {record.id}"
            )

    def get_vm(self, vm_id: str) -> VmRecord:
        with self._lock:
            try:
                return self._vms[vm_id]
            except KeyError:
                raise NotFound(f"vm {vm_id}") from None

    def vm_list(self, state: Optional[VmState] = None) -> list[VmRecord]:
        with self._lock:
            out = [
                v for v in self._vms.values() if state is None or v.state is state
            ]
            out.sort(key=lambda v: v.id)
            return out

    def update_vm(
        self,
        vm_id: str,
        mutation: Callable[[VmRecord], VmRecord],
        actor: str,
        description: str,
    ) -> VmRecord:
        with self._lock:
            current = self.get_vm(vm_id)
            updated = mutation(current)
            self._commit("vm", updated, actor, description)
            return updated

    # ------------------------------------------------------------------
    # recovery

    def recover(
        self,
        max_attempts: int = 2,
        vm_alive: Optional[Callable[[VmRecord], bool]] = None,
    ) -> RecoveryReport:
        """Repair state after an unclean shutdown.

        Preparing jobs return to Queued. Running jobs whose executor cannot
        be confirmed alive are requeued (attempt bumped) until the attempt
        budget is spent, then Failed. Unreachable VMs are Terminated so the
        billing ledger can close.
        """
        requeued = failed = lost = 0
        now = self._clock()
        with self._lock:
            alive_vms: set[str] = set()
            for vm in list(self._vms.values()):
                if vm.state not in VM_ACTIVE_STATES:
                    continue
                if vm_alive is not None and vm_alive(vm):
                    alive_vms.add(vm.id)
                    continue
                closed = replace(
                    vm,
                    state=VmState.TERMINATED,
                    terminated_at=now,
                    idle_since=None,
                    busy_since=None,
                )
                self._commit(
                    "vm", closed, "Recovery", f"mark {vm.id} lost at restart"
                )
                lost += 1

            for job in list(self._jobs.values()):
                if job.state is JobState.PREPARING:
                    self.requeue_job(
                        job.id, "Recovery", "preparing at crash", bump_attempt=False
                    )
                    requeued += 1
                elif job.state is JobState.RUNNING:
                    if job.assigned_vm and job.assigned_vm in alive_vms:
                        continue  # executor confirmed alive; leave it running
                    if job.attempt_count + 1 < max_attempts:
                        self.requeue_job(job.id, "Recovery", "executor lost")
                        requeued += 1
                    else:
                        self.update_job(
                            job.id,
                            lambda j: replace(
                                j.apply_event(JobEvent.FAIL, now),
                                attempt_count=j.attempt_count + 1,
                                error="executor lost; attempt budget exhausted",
                            ),
                            "Recovery",
                            f"fail {job.id}: attempts exhausted",
                        )
                        failed += 1
        return RecoveryReport(requeued=requeued, failed=failed, vms_marked_lost=lost)

    # ------------------------------------------------------------------
    # introspection

    @property
    def revision(self) -> int:
        with self._lock:
            return self._revision

    def audit_entries(self) -> list[AuditEntry]:
        """Mutation entries from the journal, in commit order."""
        with self._lock:
            self._journal.flush()
            out = []
            for entry in self._read_journal():
                if entry.get("kind") == "note":
                    continue
                out.append(
                    AuditEntry(
                        revision=entry["rev"],
                        actor=entry["actor"],
                        description=entry["desc"],
                        timestamp=entry["ts"],
                    )
                )
            return out

    def journal_entries(self) -> list[dict]:
        """Raw journal entries (mutations and notes)."""
        with self._lock:
            self._journal.flush()
            return list(self._read_journal())

    def snapshot_dict(self) -> dict:
        """Consistent dump of the full state (for replay checks and `dump`)."""
        with self._lock:
            return {
                "revision": self._revision,
                "jobs": {k: v.to_dict() for k, v in sorted(self._jobs.items())},
                "vms": {k: v.to_dict() for k, v in sorted(self._vms.items())},
            }

    def dump_text(self) -> str:
        with self._lock:
            lines = [f"revision {self._revision}"]
            lines.append(f"jobs ({len(self._jobs)}):")
            for j in self.list_jobs():
                lines.append(
                    f"  {j.id}  {j.state.value:<10} {j.backend.value:<6} "
                    f"kind={j.spec.kind.value} vm={j.assigned_vm or '-'} "
                    f"attempts={j.attempt_count} owner={j.spec.owner}"
                )
            lines.append(f"vms ({len(self._vms)}):")
            for v in self.vm_list():
                lines.append(
                    f"  {v.id}  {v.state.value:<11} endpoint={v.endpoint} "
                    f"jobs={v.jobs_executed}"
                )
            return "\n".join(lines) + "\n"


def replay_journal(journal_path: str | Path) -> dict:
    """Rebuild the final snapshot by replaying a journal from empty state.

    Independent of Store's in-memory bookkeeping; used to verify that the
    audit order reproduces the live snapshot bit-for-bit.
    """
    jobs: dict[str, dict] = {}
    vms: dict[str, dict] = {}
    revision = 0
    with open(journal_path, "rb") as fh:
        raw_lines = fh.read().split(b"\n")
    for line in raw_lines:
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            break  # torn tail
        if entry.get("kind") == "note":
            continue
        if entry["rev"] != revision + 1:
            raise StorageFailure(f"replay gap at rev {entry['rev']}")
        revision = entry["rev"]
        if entry["kind"] == "job":
            jobs[entry["record"]["id"]] = entry["record"]
        else:
            vms[entry["record"]["id"]] = entry["record"]
    return {
        "revision": revision,
        "jobs": dict(sorted(jobs.items())),
        "vms": dict(sorted(vms.items())),
    }
