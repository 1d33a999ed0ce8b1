"""Full-stack assembly for live (wall-clock) operation.

Builds the store, job service, HTTP API, dispatch loop, VM pool and the
legacy local/grid tier from one SystemConfig, wires the cross-component
hooks, and owns startup (including crash recovery) and shutdown order.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from .config import SystemConfig
from .dispatch import QueueManager
from .errors import BurstqError, ConfigError
from .gridlocal import LocalGridScheduler, SimGrid
from .httpapi import ApiServer
from .manager import JobService
from .model import Backend, VmRecord
from .pool import VmManager
from .providers import (
    AgentUnreachable,
    ExternalStubProvider,
    HttpVmClient,
    SimCloud,
)
from .runtime import PeriodicTask, ThreadRuntime
from .store import Store

log = logging.getLogger("burstq.service")


class Service:
    """The running service: one store, one API, three periodic activities."""

    def __init__(self, cfg: SystemConfig, runtime: Optional[ThreadRuntime] = None):
        self.cfg = cfg
        self.runtime = runtime or ThreadRuntime()
        data_dir = Path(cfg.data_dir)
        self.store = Store(
            data_dir / "store", clock=self.runtime.now, fsync=cfg.durable_fsync
        )
        self.service = JobService(
            self.store,
            self.runtime,
            data_dir,
            routing=cfg.routing_config(),
            max_upload_bytes=cfg.max_upload_bytes,
        )

        if cfg.provider == "sim":
            self.provider = SimCloud(
                self.runtime,
                transport=cfg.sim_transport,
                boot_delay=cfg.sim_boot_delay_s,
                boot_jitter=cfg.sim_boot_jitter_s,
                launch_failure_rate=cfg.sim_launch_failure_rate,
            )
        elif cfg.provider == "external-stub":
            self.provider = ExternalStubProvider()
        else:
            raise ConfigError(f"unknown provider {cfg.provider!r}")

        self.pool = VmManager(
            self.store, self.provider, self.runtime, cfg.scaling_config()
        )
        self.api = ApiServer(
            self.service,
            host=cfg.bind_host,
            port=cfg.bind_port,
            lockdown=cfg.lockdown,
            debug_endpoints=cfg.debug_endpoints,
            dispatch_trace=lambda: self.queue_manager.dispatch_trace(),
        )
        callback_base = f"http://{cfg.bind_host}:{self.api.port}"
        self.queue_manager = QueueManager(
            self.store,
            self.pool,
            self.runtime,
            jobs_dir=self.service.jobs_dir,
            callback_base=callback_base,
            cfg=cfg.dispatch_config(),
        )
        self.grid = SimGrid(
            self.runtime,
            queue_wait=cfg.grid_queue_wait_s,
            queue_wait_jitter=cfg.grid_queue_wait_jitter_s,
            submit_timeout_rate=cfg.grid_submit_timeout_rate,
        )
        self.scheduler = LocalGridScheduler(
            self.store,
            self.runtime,
            self.service.jobs_dir,
            self.grid,
            cfg.local_scheduler_config(),
        )
        self._wire_hooks()
        self._loops: list[PeriodicTask] = []

    def _wire_hooks(self) -> None:
        def release(vm_id: str) -> None:
            try:
                self.pool.release(vm_id)
            except BurstqError as exc:
                log.warning("vm release of %s skipped: %s", vm_id, exc)

        self.service.release_vm = release
        self.service.accounting_view = self.pool.accounting_report
        self.service.abort_backend = {
            Backend.CLOUD: lambda job: job.assigned_vm
            and self.pool.abort_job_on_vm(job.assigned_vm, job.id),
            Backend.LOCAL: self.scheduler.abort_local,
            Backend.GRID: self.scheduler.abort_grid,
        }

        def poke(_record) -> None:
            for loop in self._loops:
                loop.poke()

        self.service.on_enqueue = poke

    # ------------------------------------------------------------------

    def _vm_alive(self, vm: VmRecord) -> bool:
        try:
            if vm.endpoint.startswith("http"):
                HttpVmClient(vm.endpoint, timeout=2.0).status()
            else:
                self.provider.client_for(vm.provider_handle).status()
            return True
        except (AgentUnreachable, BurstqError):
            return False

    def start(self) -> "Service":
        report = self.store.recover(
            max_attempts=self.cfg.max_attempts, vm_alive=self._vm_alive
        )
        if report.requeued or report.failed or report.vms_marked_lost:
            log.info(
                "recovery: requeued=%d failed=%d vms_marked_lost=%d",
                report.requeued,
                report.failed,
                report.vms_marked_lost,
            )
        self.api.start()
        rt = self.runtime
        self._loops = [
            PeriodicTask(rt, self.cfg.poll_interval_s, self.queue_manager.tick).start(),
            PeriodicTask(rt, self.cfg.vm_poll_interval_s, self.pool.tick).start(),
            PeriodicTask(rt, self.cfg.poll_interval_s, self.scheduler.tick).start(),
            PeriodicTask(
                rt,
                self.cfg.remote_poll_interval_s,
                lambda now: self.scheduler.remote_poll_tick(now),
            ).start(),
        ]
        log.info("service listening on %s", self.api.url)
        return self

    def stop(self, terminate_vms: bool = True) -> None:
        for loop in self._loops:
            loop.stop()
        self._loops = []
        self.scheduler.stop()
        self.pool.shutdown(terminate_vms=terminate_vms)
        self.api.stop()
        self.store.close()

    @property
    def url(self) -> str:
        return self.api.url
