"""Elastic VM pool: scaling policy, lifecycle reconciliation and billing.

The pool balances two pressures - jobs should not wait long, VMs should
not sit idle long - while respecting the provider's minimum charging
period. Launches cover the queue-depth deficit up to ``max_vms``.
Termination is deliberately conservative:

* only idle VMs, idle for at least ``idle_grace``, with an empty queue and
  the pool above ``min_vms``;
* only inside ``terminate_window`` of the VM's next billing boundary, so a
  period that has been paid for stays available for reuse until it is
  nearly over;
* never before the VM has completed its first billing period - the
  minimum charging period is owed regardless, so giving the instance up
  early can only waste it.

Billing: every VM is charged ``max(1, ceil(uptime / period))`` periods.
The cost ledger is a pure view over the store (VM uptimes and per-job
runtimes), so it needs no storage of its own and cannot drift.
"""

from __future__ import annotations

import logging
import math
import secrets
import threading
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .errors import IllegalTransition, ValidationError
from .model import (
    Backend,
    JobRecord,
    JobState,
    VM_ACTIVE_STATES,
    VmRecord,
    VmState,
)
from .providers import AgentUnreachable, Provider, VmClient
from .runtime import Runtime
from .store import Store

log = logging.getLogger("burstq.pool")


@dataclass(frozen=True)
class ScalingConfig:
    min_vms: int = 0
    max_vms: int = 4
    idle_grace: float = 120.0
    terminate_window: float = 300.0
    billing_period: float = 3600.0
    boot_budget: float = 90.0
    unit_price: float = 0.10
    probe_failures_to_lost: int = 2

    def __post_init__(self) -> None:
        if not (0 <= self.min_vms <= self.max_vms):
            raise ValidationError("need 0 <= min_vms <= max_vms")
        if not (0 < self.terminate_window < self.billing_period):
            raise ValidationError("need 0 < terminate_window < billing_period")


def billing_periods(uptime: float, period: float) -> int:
    """Charged periods for an uptime: at least one, then one per started period."""
    if uptime < 0:
        raise ValidationError("uptime must be >= 0")
    if period <= 0:
        raise ValidationError("period must be > 0")
    return max(1, math.ceil(uptime / period))


@dataclass(frozen=True)
class ScaleAction:
    kind: str  # "launch" | "terminate"
    vm_id: Optional[str] = None


def plan_scaling(
    vms: list[VmRecord],
    queue_depth: int,
    oldest_wait: float,
    now: float,
    cfg: ScalingConfig,
) -> list[ScaleAction]:
    """Pure scaling decision over a pool snapshot."""
    non_terminated = [v for v in vms if v.state is not VmState.TERMINATED]
    idle = [v for v in non_terminated if v.state is VmState.IDLE]
    booting = [v for v in non_terminated if v.state is VmState.BOOTING]

    actions: list[ScaleAction] = []
    supply = len(idle) + len(booting)
    total = len(non_terminated)
    while queue_depth > supply and total < cfg.max_vms:
        actions.append(ScaleAction("launch"))
        supply += 1
        total += 1

    if queue_depth == 0:
        pool_size = len(non_terminated)
        for vm in sorted(idle, key=lambda v: (v.idle_since or 0.0, v.id)):
            if pool_size <= cfg.min_vms:
                break
            if vm.idle_since is None or now - vm.idle_since < cfg.idle_grace:
                continue
            if now - vm.launched_at < cfg.billing_period:
                continue  # first paid period: keep for reuse
            into_period = (now - vm.billing_anchor) % cfg.billing_period
            remaining = cfg.billing_period - into_period
            if remaining <= cfg.terminate_window:
                actions.append(ScaleAction("terminate", vm.id))
                pool_size -= 1
    return actions


class VmManager:
    """Owns the pool: acquire/release for the dispatcher, periodic
    scale-and-reconcile, and the cost ledger view.

    acquire/release/tick serialize on one lock, so a VM is never handed to
    two dispatchers and scaling decisions see a consistent pool. Provider
    and agent calls are made without holding the store's serialization
    point (the store locks internally per operation).
    """

    def __init__(
        self,
        store: Store,
        provider: Provider,
        runtime: Runtime,
        cfg: ScalingConfig = ScalingConfig(),
        image_ref: str = "burstq-agent",
        vm_size: str = "standard",
        repair_busy_after: float = 60.0,
    ) -> None:
        self.store = store
        self.provider = provider
        self.runtime = runtime
        self.cfg = cfg
        self.image_ref = image_ref
        self.vm_size = vm_size
        self.repair_busy_after = repair_busy_after
        self._lock = threading.RLock()
        self.launch_failures = 0
        self._backoff_exponent = 0
        self._launch_blocked_until = 0.0
        self.scaling_log: list[dict] = []
        # set by the dispatcher: called when a busy VM is declared lost
        self.on_agent_failure: Optional[Callable[[str, str, str], None]] = None

    # ------------------------------------------------------------------
    # dispatcher interface

    def acquire_idle_vm(self) -> Optional[VmRecord]:
        """Atomically reserve an idle VM; never hands one VM to two callers."""
        with self._lock:
            idle = self.store.vm_list(VmState.IDLE)
            if not idle:
                return None
            vm = idle[0]
            now = self.runtime.now()
            return self.store.update_vm(
                vm.id,
                lambda v: replace(
                    v, state=VmState.BUSY, busy_since=now, idle_since=None
                ),
                "VmManager",
                f"reserve {vm.id}",
            )

    def release(self, vm_id: str) -> None:
        """Return a busy VM to idle so it can run another job."""
        with self._lock:
            vm = self.store.get_vm(vm_id)
            if vm.state is not VmState.BUSY:
                raise IllegalTransition(vm.state.value, "release")
            now = self.runtime.now()
            busy_add = (now - vm.busy_since) if vm.busy_since is not None else 0.0
            self.store.update_vm(
                vm_id,
                lambda v: replace(
                    v,
                    state=VmState.IDLE,
                    idle_since=now,
                    busy_since=None,
                    busy_seconds=v.busy_seconds + busy_add,
                    jobs_executed=v.jobs_executed + 1,
                    probe_failures=0,
                ),
                "VmManager",
                f"release {vm_id}",
            )

    def mark_lost(self, vm_id: str, reason: str) -> None:
        with self._lock:
            vm = self.store.get_vm(vm_id)
            if vm.state not in VM_ACTIVE_STATES:
                return
            self.store.update_vm(
                vm_id,
                lambda v: replace(v, state=VmState.LOST),
                "VmManager",
                f"{vm_id} lost: {reason}",
            )

    def client_for(self, vm: VmRecord) -> VmClient:
        return self.provider.client_for(vm.provider_handle)

    def abort_job_on_vm(self, vm_id: str, job_id: str) -> None:
        vm = self.store.get_vm(vm_id)
        self.client_for(vm).abort(job_id)

    # ------------------------------------------------------------------
    # periodic loop

    def tick(self, now: float) -> None:
        with self._lock:
            self.reconcile(now)
            self.scale_and_apply(now)

    def reconcile(self, now: float) -> None:
        """Converge VM records toward provider and agent reality."""
        for vm in self.store.vm_list():
            if vm.state is VmState.BOOTING:
                self._reconcile_booting(vm, now)
            elif vm.state in (VmState.IDLE, VmState.BUSY):
                self._probe(vm, now)
            elif vm.state is VmState.LOST:
                self.provider.terminate(vm.provider_handle)
                self._close(vm, now, "lost")
            elif vm.state is VmState.TERMINATING:
                self._close(vm, now, "terminating")

    def _reconcile_booting(self, vm: VmRecord, now: float) -> None:
        desc = self.provider.describe(vm.provider_handle)
        if desc == "running":
            endpoint = self.provider.endpoint(vm.provider_handle) or vm.endpoint
            try:
                self.provider.client_for(vm.provider_handle).status()
            except AgentUnreachable:
                return  # agent not answering yet; try next tick
            self.store.update_vm(
                vm.id,
                lambda v: replace(
                    v, state=VmState.IDLE, endpoint=endpoint, idle_since=now
                ),
                "VmManager",
                f"{vm.id} booted",
            )
        elif desc in ("error", "terminated") or now - vm.launched_at > self.cfg.boot_budget:
            self.provider.terminate(vm.provider_handle)
            self._close(vm, now, f"boot failed ({desc})")
            self.launch_failures += 1
            self._backoff_exponent += 1
            self._launch_blocked_until = now + min(
                2.0**self._backoff_exponent, 60.0
            )

    def _probe(self, vm: VmRecord, now: float) -> None:
        try:
            status = self.provider.client_for(vm.provider_handle).status()
        except AgentUnreachable as exc:
            failures = vm.probe_failures + 1
            if failures >= self.cfg.probe_failures_to_lost:
                self.mark_lost(vm.id, f"agent unreachable: {exc}")
                self._report_lost_jobs(vm.id, str(exc))
            else:
                self.store.update_vm(
                    vm.id,
                    lambda v: replace(v, probe_failures=failures),
                    "VmManager",
                    f"{vm.id} probe failure {failures}",
                )
            return
        if vm.probe_failures:
            self.store.update_vm(
                vm.id,
                lambda v: replace(v, probe_failures=0),
                "VmManager",
                f"{vm.id} probe recovered",
            )
        # Repair phantom-busy bookkeeping: agent idle, no running job, and
        # well past any in-flight dispatch.
        if (
            vm.state is VmState.BUSY
            and status.get("mode") == "idle"
            and vm.busy_since is not None
            and now - vm.busy_since > self.repair_busy_after
            and not self._running_job_on(vm.id)
        ):
            self.release(vm.id)
            self.store.update_vm(
                vm.id,
                lambda v: replace(v, jobs_executed=max(0, v.jobs_executed - 1)),
                "VmManager",
                f"{vm.id} busy bookkeeping repaired",
            )

    def _running_job_on(self, vm_id: str) -> Optional[JobRecord]:
        for job in self.store.list_jobs(state=JobState.RUNNING):
            if job.assigned_vm == vm_id:
                return job
        return None

    def _report_lost_jobs(self, vm_id: str, reason: str) -> None:
        job = self._running_job_on(vm_id)
        if job is not None and self.on_agent_failure is not None:
            self.on_agent_failure(job.id, vm_id, reason)

    def _close(self, vm: VmRecord, now: float, why: str) -> None:
        busy_add = (now - vm.busy_since) if vm.busy_since is not None else 0.0
        self.store.update_vm(
            vm.id,
            lambda v: replace(
                v,
                state=VmState.TERMINATED,
                terminated_at=now,
                busy_seconds=v.busy_seconds + busy_add,
                busy_since=None,
                idle_since=None,
            ),
            "VmManager",
            f"terminated {vm.id} ({why})",
        )

    def scale_and_apply(self, now: float) -> list[ScaleAction]:
        depth, oldest_submit = self.store.queued_depth(Backend.CLOUD)
        oldest_wait = (now - oldest_submit) if depth else 0.0
        actions = plan_scaling(self.store.vm_list(), depth, oldest_wait, now, self.cfg)
        applied: list[ScaleAction] = []
        for action in actions:
            if action.kind == "launch":
                if now < self._launch_blocked_until:
                    continue  # backing off after launch failures
                vm = self._launch(now)
                applied.append(ScaleAction("launch", vm.id))
                self._log_decision(now, "launch", vm.id, depth, oldest_wait)
            else:
                assert action.vm_id is not None
                self._terminate(action.vm_id, now)
                applied.append(action)
                self._log_decision(now, "terminate", action.vm_id, depth, oldest_wait)
        return applied

    def notify_demand(self, depth: int, oldest_wait: float) -> None:
        """Immediate reaction to dispatcher demand, ahead of the next tick."""
        with self._lock:
            self.scale_and_apply(self.runtime.now())

    def _launch(self, now: float) -> VmRecord:
        handle = self.provider.launch(self.image_ref, self.vm_size)
        vm = VmRecord(
            id=self.store.next_vm_id(),
            provider_handle=handle,
            endpoint=self.provider.endpoint(handle) or f"pending:{handle}",
            state=VmState.BOOTING,
            launched_at=now,
            billing_anchor=now,
            token_secret=secrets.token_urlsafe(32),
            token_issued_at=now,
        )
        self.store.vm_upsert(vm, "VmManager", f"launch {vm.id} ({handle})")
        return vm

    def _terminate(self, vm_id: str, now: float) -> None:
        vm = self.store.get_vm(vm_id)
        if vm.state is VmState.TERMINATED:
            return
        self.store.update_vm(
            vm_id,
            lambda v: replace(v, state=VmState.TERMINATING),
            "VmManager",
            f"terminating {vm_id}",
        )
        self.provider.terminate(vm.provider_handle)
        self._close(replace(vm, state=VmState.TERMINATING), now, "scale-down")

    def _log_decision(
        self, now: float, action: str, vm_id: str, depth: int, oldest_wait: float
    ) -> None:
        entry = {
            "t": now,
            "action": action,
            "vm_id": vm_id,
            "queue_depth": depth,
            "oldest_wait": round(oldest_wait, 6),
        }
        self.scaling_log.append(entry)
        log.info(
            "scaling: %s %s (depth=%d, oldest_wait=%.1fs)",
            action,
            vm_id,
            depth,
            oldest_wait,
        )

    def shutdown(self, terminate_vms: bool = True) -> None:
        if not terminate_vms:
            return
        now = self.runtime.now()
        with self._lock:
            for vm in self.store.vm_list():
                if vm.state is not VmState.TERMINATED:
                    self.provider.terminate(vm.provider_handle)
                    self._close(vm, now, "service shutdown")

    # ------------------------------------------------------------------
    # accounting

    def accounting_report(self) -> dict:
        """SAFE-style ledger: billed periods per VM, runtime per job/owner."""
        now = self.runtime.now()
        vm_rows = []
        total_periods = 0
        for vm in self.store.vm_list():
            uptime = (vm.terminated_at if vm.terminated_at is not None else now) - vm.launched_at
            periods = billing_periods(uptime, self.cfg.billing_period)
            total_periods += periods
            vm_rows.append(
                {
                    "vm_id": vm.id,
                    "launched_at": vm.launched_at,
                    "terminated_at": vm.terminated_at,
                    "uptime_seconds": round(uptime, 6),
                    "periods_billed": periods,
                    "unit_price": self.cfg.unit_price,
                    "cost": round(periods * self.cfg.unit_price, 10),
                    "jobs_executed": vm.jobs_executed,
                    "busy_seconds": round(vm.busy_seconds, 6),
                }
            )
        job_rows = []
        for job in self.store.list_jobs():
            if job.assigned_vm is None or job.runtime_seconds is None:
                continue
            job_rows.append(
                {
                    "job_id": job.id,
                    "owner": job.spec.owner,
                    "vm_id": job.assigned_vm,
                    "runtime_seconds": round(job.runtime_seconds, 6),
                }
            )
        return {
            "vms": vm_rows,
            "jobs": job_rows,
            "total_periods": total_periods,
            "total_cost": round(total_periods * self.cfg.unit_price, 10),
        }
