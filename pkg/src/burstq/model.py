"""Core domain model: job lifecycle, dataset sizing, and backend routing.

Pure functions and frozen value types only - no I/O, no clock access.
Everything in this module is safe to use from any thread without
coordination.

Job lifecycle::

    Queued ──PrepareRemote──> Preparing ──Dispatch──> Running
      │ └───────Dispatch─────────────────────────────────^ │
      │                                                    │ResultsReceived
      ├─Fail/Cancel──> Failed/Cancelled <──Fail/Cancel─────┤
      │                                                    v
      └────────────────────────────────────────────── Completed

Completed, Failed and Cancelled are absorbing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional

from .errors import IllegalTransition, ValidationError


class Backend(str, Enum):
    LOCAL = "Local"
    GRID = "Grid"
    CLOUD = "Cloud"


class JobState(str, Enum):
    QUEUED = "Queued"
    PREPARING = "Preparing"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


class JobEvent(str, Enum):
    PREPARE_REMOTE = "PrepareRemote"
    DISPATCH = "Dispatch"
    RESULTS_RECEIVED = "ResultsReceived"
    FAIL = "Fail"
    CANCEL = "Cancel"


TERMINAL_STATES = frozenset(
    {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED}
)

# The complete legal-transition table. Any (state, event) pair absent here
# raises IllegalTransition; terminal states deliberately have no entries.
_TRANSITIONS: dict[tuple[JobState, JobEvent], JobState] = {
    (JobState.QUEUED, JobEvent.PREPARE_REMOTE): JobState.PREPARING,
    (JobState.QUEUED, JobEvent.DISPATCH): JobState.RUNNING,
    (JobState.QUEUED, JobEvent.FAIL): JobState.FAILED,
    (JobState.QUEUED, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.PREPARING, JobEvent.DISPATCH): JobState.RUNNING,
    (JobState.PREPARING, JobEvent.FAIL): JobState.FAILED,
    (JobState.PREPARING, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.RUNNING, JobEvent.RESULTS_RECEIVED): JobState.COMPLETED,
    (JobState.RUNNING, JobEvent.FAIL): JobState.FAILED,
    (JobState.RUNNING, JobEvent.CANCEL): JobState.CANCELLED,
}


def is_terminal(state: JobState) -> bool:
    return state in TERMINAL_STATES


def transition(state: JobState, event: JobEvent) -> JobState:
    """Return the successor state, or raise IllegalTransition."""
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(state.value, event.value) from None


def display_color(state: JobState, backend: Backend) -> str:
    """Map a (state, backend) pair onto the job-viewer colour legend.

    Queueing and preparing jobs are pink, running orange, errors red.
    Completion is backend-specific: blue for local, green for grid, teal
    for cloud. Cancelled jobs are gray.
    """
    if state in (JobState.QUEUED, JobState.PREPARING):
        return "pink"
    if state is JobState.RUNNING:
        return "orange"
    if state is JobState.FAILED:
        return "red"
    if state is JobState.CANCELLED:
        return "gray"
    # Completed
    return {
        Backend.LOCAL: "blue",
        Backend.GRID: "green",
        Backend.CLOUD: "teal",
    }[backend]


@dataclass(frozen=True)
class DatasetProfile:
    """Size profile of a submitted dataset.

    ``max_markers`` is the maximum marker count on any chromosome - the
    quantity that drives memory needs and therefore routing.
    """

    max_markers: int
    sample_size: int
    input_bytes: int = 0

    def __post_init__(self) -> None:
        if self.max_markers < 1:
            raise ValidationError("max_markers must be >= 1")
        if self.sample_size < 1:
            raise ValidationError("sample_size must be >= 1")
        if self.input_bytes < 0:
            raise ValidationError("input_bytes must be >= 0")

    def to_dict(self) -> dict[str, int]:
        return {
            "max_markers": self.max_markers,
            "sample_size": self.sample_size,
            "input_bytes": self.input_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DatasetProfile":
        return cls(
            max_markers=int(d["max_markers"]),
            sample_size=int(d["sample_size"]),
            input_bytes=int(d.get("input_bytes", 0)),
        )


@dataclass(frozen=True)
class RoutingConfig:
    """Thresholds and constants of the size-based routing model.

    Memory grows with the square of the marker count, anchored at
    ``gb_at_threshold`` GB for ``big_memory_marker_threshold`` markers.
    Datasets above ``max_marker_capacity`` markers are oversize for every
    tier this service operates.
    """

    local_marker_threshold: int = 100
    big_memory_marker_threshold: int = 1200
    max_marker_capacity: int = 5000
    gb_per_core: float = 4.0
    gb_at_threshold: float = 4.0
    cloud_enabled: bool = True

    def __post_init__(self) -> None:
        if not (
            self.local_marker_threshold
            < self.big_memory_marker_threshold
            < self.max_marker_capacity
        ):
            raise ValidationError(
                "thresholds must satisfy local < big-memory < capacity"
            )
        if self.gb_per_core <= 0:
            raise ValidationError("gb_per_core must be > 0")


@dataclass(frozen=True)
class RoutingDecision:
    backend: Backend
    est_memory_gb: float
    core_group: int
    oversize: bool = False


def estimate_memory_gb(max_markers: int, cfg: RoutingConfig) -> float:
    """Estimated memory in GB: quadratic in the marker count.

    Anchored so that ``big_memory_marker_threshold`` markers need exactly
    ``gb_at_threshold`` GB.
    """
    if max_markers < 0:
        raise ValidationError("max_markers must be >= 0")
    ratio = max_markers / cfg.big_memory_marker_threshold
    return cfg.gb_at_threshold * ratio * ratio


def core_group_size(est_memory_gb: float, cfg: RoutingConfig) -> int:
    """Number of cores to group so the pooled RAM covers the estimate."""
    if est_memory_gb < 0:
        raise ValidationError("est_memory_gb must be >= 0")
    return max(1, math.ceil(est_memory_gb / cfg.gb_per_core))


def route(
    profile: DatasetProfile,
    override: Optional[Backend],
    cfg: RoutingConfig,
) -> RoutingDecision:
    """Pick a backend tier for a dataset profile.

    Small jobs run locally; anything past the local threshold goes to the
    remote tier (cloud when enabled, grid otherwise). A user override wins
    over size-based routing. Oversize is computed regardless of override so
    callers can refuse such jobs.
    """
    markers = profile.max_markers
    est = estimate_memory_gb(markers, cfg)
    group = core_group_size(est, cfg)
    oversize = markers > cfg.max_marker_capacity
    remote = Backend.CLOUD if cfg.cloud_enabled else Backend.GRID

    if override is not None:
        backend = override
    elif markers <= cfg.local_marker_threshold:
        backend = Backend.LOCAL
    else:
        backend = remote
    return RoutingDecision(
        backend=backend, est_memory_gb=est, core_group=group, oversize=oversize
    )


class JobKind(str, Enum):
    SLEEP = "sleep"
    REGRESSION_SCAN = "regression-scan"


@dataclass(frozen=True)
class JobSpec:
    """What the user asked for: kind, parameters, inputs and routing hints."""

    kind: JobKind
    params: dict[str, str] = field(default_factory=dict)
    input_names: tuple[str, ...] = ()
    profile: DatasetProfile = DatasetProfile(max_markers=1, sample_size=1)
    backend_override: Optional[Backend] = None
    derive_from: Optional[str] = None
    owner: str = "anonymous"

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "params": dict(self.params),
            "input_names": list(self.input_names),
            "profile": self.profile.to_dict(),
            "backend_override": (
                self.backend_override.value if self.backend_override else None
            ),
            "derive_from": self.derive_from,
            "owner": self.owner,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "JobSpec":
        override = d.get("backend_override")
        return cls(
            kind=JobKind(d["kind"]),
            params=dict(d.get("params", {})),
            input_names=tuple(d.get("input_names", ())),
            profile=DatasetProfile.from_dict(d["profile"]),
            backend_override=Backend(override) if override else None,
            derive_from=d.get("derive_from"),
            owner=d.get("owner", "anonymous"),
        )


@dataclass(frozen=True)
class JobRecord:
    """A submitted job as persisted in the store.

    Immutable; the store applies mutations by replacing the whole record
    under its serialization lock.
    """

    id: str
    spec: JobSpec
    state: JobState
    backend: Backend
    assigned_vm: Optional[str] = None
    submitted_at: float = 0.0
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    result_ref: Optional[str] = None
    result_digest: Optional[str] = None
    error: Optional[str] = None
    attempt_count: int = 0
    est_memory_gb: float = 0.0
    core_group: int = 1

    def apply_event(self, event: JobEvent, now: float) -> "JobRecord":
        """Advance the lifecycle, stamping timestamps as states demand."""
        new_state = transition(self.state, event)
        updates: dict[str, Any] = {"state": new_state}
        if new_state is JobState.RUNNING and self.started_at is None:
            updates["started_at"] = now
        if new_state in TERMINAL_STATES:
            updates["finished_at"] = now
        return replace(self, **updates)

    @property
    def color(self) -> str:
        return display_color(self.state, self.backend)

    @property
    def runtime_seconds(self) -> Optional[float]:
        if self.started_at is None:
            return None
        if self.finished_at is None:
            return None
        return self.finished_at - self.started_at

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "spec": self.spec.to_dict(),
            "state": self.state.value,
            "backend": self.backend.value,
            "assigned_vm": self.assigned_vm,
            "submitted_at": self.submitted_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "result_ref": self.result_ref,
            "result_digest": self.result_digest,
            "error": self.error,
            "attempt_count": self.attempt_count,
            "est_memory_gb": self.est_memory_gb,
            "core_group": self.core_group,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "JobRecord":
        return cls(
            id=d["id"],
            spec=JobSpec.from_dict(d["spec"]),
            state=JobState(d["state"]),
            backend=Backend(d["backend"]),
            assigned_vm=d.get("assigned_vm"),
            submitted_at=d.get("submitted_at", 0.0),
            started_at=d.get("started_at"),
            finished_at=d.get("finished_at"),
            result_ref=d.get("result_ref"),
            result_digest=d.get("result_digest"),
            error=d.get("error"),
            attempt_count=d.get("attempt_count", 0),
            est_memory_gb=d.get("est_memory_gb", 0.0),
            core_group=d.get("core_group", 1),
        )


class VmState(str, Enum):
    BOOTING = "Booting"
    IDLE = "Idle"
    BUSY = "Busy"
    LOST = "Lost"
    TERMINATING = "Terminating"
    TERMINATED = "Terminated"


VM_ACTIVE_STATES = frozenset({VmState.BOOTING, VmState.IDLE, VmState.BUSY})


@dataclass(frozen=True)
class VmRecord:
    """A pool member: provider handle, endpoint and lifecycle bookkeeping.

    ``billing_anchor`` equals the launch time; billing periods are counted
    from it. The push token minted at launch authenticates result pushes
    from this VM and is bound to it alone.
    """

    id: str
    provider_handle: str
    endpoint: str
    state: VmState
    launched_at: float
    billing_anchor: float
    token_secret: str
    token_issued_at: float
    jobs_executed: int = 0
    idle_since: Optional[float] = None
    busy_since: Optional[float] = None
    busy_seconds: float = 0.0
    terminated_at: Optional[float] = None
    probe_failures: int = 0

    @property
    def uptime(self) -> Optional[float]:
        if self.terminated_at is None:
            return None
        return self.terminated_at - self.launched_at

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "provider_handle": self.provider_handle,
            "endpoint": self.endpoint,
            "state": self.state.value,
            "launched_at": self.launched_at,
            "billing_anchor": self.billing_anchor,
            "token_secret": self.token_secret,
            "token_issued_at": self.token_issued_at,
            "jobs_executed": self.jobs_executed,
            "idle_since": self.idle_since,
            "busy_since": self.busy_since,
            "busy_seconds": self.busy_seconds,
            "terminated_at": self.terminated_at,
            "probe_failures": self.probe_failures,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VmRecord":
        return cls(
            id=d["id"],
            provider_handle=d["provider_handle"],
            endpoint=d["endpoint"],
            state=VmState(d["state"]),
            launched_at=d["launched_at"],
            billing_anchor=d["billing_anchor"],
            token_secret=d["token_secret"],
            token_issued_at=d["token_issued_at"],
            jobs_executed=d.get("jobs_executed", 0),
            idle_since=d.get("idle_since"),
            busy_since=d.get("busy_since"),
            busy_seconds=d.get("busy_seconds", 0.0),
            terminated_at=d.get("terminated_at"),
            probe_failures=d.get("probe_failures", 0),
        )
