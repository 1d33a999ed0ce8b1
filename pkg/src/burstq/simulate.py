"""Accelerated-time simulation of the full stack.

Drives the job manager, dispatch loop, VM pool (SimCloud with the virtual
transport) and the local/grid tier on a deterministic virtual clock. All
randomness is seeded and all callbacks fire in (time, schedule-order)
sequence, so identical seed and config produce byte-identical metrics.
The acceleration factor only paces the virtual clock against real time;
policy decisions depend on virtual time alone.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

from .config import SystemConfig
from .dispatch import QueueManager
from .errors import (
    AuthFailure,
    BurstqError,
    ConflictingResults,
    NotFound,
    NotReady,
    ValidationError,
)
from .gridlocal import LocalGridScheduler, SimGrid
from .manager import JobService
from .model import Backend, JobState, VmState, is_terminal
from .pool import VmManager, billing_periods
from .providers import SimCloud
from .runtime import PeriodicTask, SimRuntime
from .store import Store
from .workload import Arrival

METRICS_SCHEMA_VERSION = 1


def direct_push_transport(service: JobService):
    """Virtual transport: agent result pushes become direct service calls,
    translated to the status codes the HTTP route would return."""

    def push(callback_url: str, token: str, bundle) -> int:
        try:
            service.receive_results(
                bundle.job_id, token, bundle.exit_status, bundle.outputs, bundle.log_text
            )
            return 200
        except AuthFailure:
            return 403
        except NotFound:
            return 404
        except (ConflictingResults, NotReady):
            return 409
        except ValidationError:
            return 400

    return push


class SimSystem:
    """The simulated stack plus its periodic loops."""

    def __init__(self, cfg: SystemConfig, data_dir: Path, seed: int,
                 acceleration: Optional[float] = None):
        self.cfg = cfg
        self.runtime = SimRuntime(acceleration=acceleration)
        self.store = Store(data_dir / "store", clock=self.runtime.now, fsync=False)
        self.service = JobService(
            self.store,
            self.runtime,
            data_dir,
            routing=cfg.routing_config(),
            max_upload_bytes=cfg.max_upload_bytes,
        )
        self.provider = SimCloud(
            self.runtime,
            transport="direct",
            boot_delay=cfg.sim_boot_delay_s,
            boot_jitter=cfg.sim_boot_jitter_s,
            launch_failure_rate=cfg.sim_launch_failure_rate,
            seed=seed + 1,
            push_transport=direct_push_transport(self.service),
            workdir=str(data_dir / "agents"),
        )
        self.pool = VmManager(
            self.store, self.provider, self.runtime, cfg.scaling_config()
        )
        self.queue_manager = QueueManager(
            self.store,
            self.pool,
            self.runtime,
            jobs_dir=self.service.jobs_dir,
            callback_base="direct://",
            cfg=cfg.dispatch_config(),
        )
        self.grid = SimGrid(
            self.runtime,
            queue_wait=cfg.grid_queue_wait_s,
            queue_wait_jitter=cfg.grid_queue_wait_jitter_s,
            submit_timeout_rate=cfg.grid_submit_timeout_rate,
            seed=seed + 2,
        )
        self.scheduler = LocalGridScheduler(
            self.store,
            self.runtime,
            self.service.jobs_dir,
            self.grid,
            cfg.local_scheduler_config(),
        )
        self._wire()
        self.loops = [
            PeriodicTask(self.runtime, cfg.poll_interval_s, self.queue_manager.tick),
            PeriodicTask(self.runtime, cfg.vm_poll_interval_s, self.pool.tick),
            PeriodicTask(self.runtime, cfg.poll_interval_s, self.scheduler.tick),
            PeriodicTask(
                self.runtime,
                cfg.remote_poll_interval_s,
                lambda now: self.scheduler.remote_poll_tick(now),
            ),
        ]

    def _wire(self) -> None:
        def release(vm_id: str) -> None:
            try:
                self.pool.release(vm_id)
            except BurstqError:
                pass

        self.service.release_vm = release
        self.service.accounting_view = self.pool.accounting_report
        self.service.abort_backend = {
            Backend.CLOUD: lambda job: job.assigned_vm
            and self.pool.abort_job_on_vm(job.assigned_vm, job.id),
            Backend.LOCAL: self.scheduler.abort_local,
            Backend.GRID: self.scheduler.abort_grid,
        }

    def start_loops(self) -> None:
        for loop in self.loops:
            loop.start()

    def stop_loops(self) -> None:
        for loop in self.loops:
            loop.stop()


def run_simulation(
    schedule: list[Arrival],
    cfg: SystemConfig,
    data_dir: str | Path,
    seed: int = 0,
    acceleration: Optional[float] = None,
    drain_cap: Optional[float] = None,
    out_path: Optional[str | Path] = None,
) -> dict:
    """Run a schedule against the full stack; returns the metrics document."""
    if acceleration is not None and acceleration < 1:
        raise ValidationError("acceleration must be >= 1")
    system = SimSystem(cfg, Path(data_dir), seed, acceleration)
    rt = system.runtime
    submitted_ids: list[str] = []

    def submit(arrival: Arrival) -> None:
        job_id = system.service.submit(
            kind=arrival.kind,
            params=arrival.params,
            backend_override=arrival.backend_override,
            owner=arrival.owner,
        )
        submitted_ids.append(job_id)

    for arrival in schedule:
        rt.schedule(arrival.t, lambda a=arrival: submit(a))

    horizon_end = max((a.t for a in schedule), default=0.0)
    if drain_cap is None:
        drain_cap = 2 * cfg.billing_period_s + 600.0
    system.start_loops()

    def quiescent() -> bool:
        if len(submitted_ids) < len(schedule):
            return False
        jobs = system.store.list_jobs()
        if any(not is_terminal(j.state) for j in jobs):
            return False
        return all(
            v.state is VmState.TERMINATED for v in system.store.vm_list()
        )

    rt.run(until_idle=quiescent, max_time=horizon_end + drain_cap)
    system.stop_loops()
    system.pool.shutdown(terminate_vms=True)

    metrics = compute_metrics(system, seed, len(schedule))
    if out_path is not None:
        Path(out_path).write_text(render_metrics(metrics), encoding="utf-8")
    system.store.close()
    return metrics


def render_metrics(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def _percentile95(values: list[float]) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(0.95 * len(ordered)))
    return ordered[rank - 1]


def compute_metrics(system: SimSystem, seed: int, scheduled: int) -> dict:
    store = system.store
    now = system.runtime.now()
    jobs = store.list_jobs()

    by_backend: dict[str, dict] = {}
    waits_all: list[float] = []
    counts = {"submitted": 0, "completed": 0, "failed": 0, "cancelled": 0, "queued_at_end": 0}
    for job in jobs:
        be = by_backend.setdefault(
            job.backend.value,
            {"submitted": 0, "completed": 0, "failed": 0, "cancelled": 0, "wait_mean_s": 0.0, "_waits": []},
        )
        counts["submitted"] += 1
        be["submitted"] += 1
        if job.state is JobState.COMPLETED:
            counts["completed"] += 1
            be["completed"] += 1
        elif job.state is JobState.FAILED:
            counts["failed"] += 1
            be["failed"] += 1
        elif job.state is JobState.CANCELLED:
            counts["cancelled"] += 1
            be["cancelled"] += 1
        elif job.state is JobState.QUEUED:
            counts["queued_at_end"] += 1
        if job.started_at is not None:
            wait = job.started_at - job.submitted_at
            waits_all.append(wait)
            be["_waits"].append(wait)

    for be in by_backend.values():
        waits = be.pop("_waits")
        be["wait_mean_s"] = round(sum(waits) / len(waits), 6) if waits else 0.0
        be["wait_p95_s"] = round(_percentile95(waits), 6)

    vms = store.vm_list()
    uptime_total = sum((v.terminated_at or now) - v.launched_at for v in vms)
    busy_total = sum(v.busy_seconds for v in vms)
    periods_total = sum(
        billing_periods((v.terminated_at or now) - v.launched_at, system.cfg.billing_period_s)
        for v in vms
    )
    oldest_unstarted = max(
        (now - j.submitted_at for j in jobs if j.state is JobState.QUEUED),
        default=0.0,
    )

    assert counts["completed"] + counts["failed"] + counts["cancelled"] <= counts["submitted"]
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "seed": seed,
        "scheduled_arrivals": scheduled,
        "virtual_duration_s": round(now, 6),
        "jobs": {**counts, "by_backend": by_backend},
        "queue_wait_s": {
            "mean": round(sum(waits_all) / len(waits_all), 6) if waits_all else 0.0,
            "p95": round(_percentile95(waits_all), 6),
            "oldest_unstarted": round(oldest_unstarted, 6),
        },
        "vms": {
            "launched": len(vms),
            "terminated": sum(1 for v in vms if v.state is VmState.TERMINATED),
            "launch_failures": system.pool.launch_failures,
            "busy_fraction": round(busy_total / uptime_total, 6) if uptime_total else 0.0,
        },
        "billing": {
            "periods": periods_total,
            "unit_price": system.cfg.unit_price,
            "total_cost": round(periods_total * system.cfg.unit_price, 10),
        },
        "scaling_log": [
            {**entry, "t": round(entry["t"], 6)} for entry in system.pool.scaling_log
        ],
    }
