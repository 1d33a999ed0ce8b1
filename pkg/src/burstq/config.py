"""Flat key/value configuration.

Files are ``key = value`` lines with ``#`` comments. Every tunable named
in the module contracts appears here with its default; unknown keys are
rejected so typos fail loudly. The ``BURSTQ_CONFIG`` environment variable
names a config file to load when none is passed explicitly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

ENV_VAR = "BURSTQ_CONFIG"


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


@dataclass
class SystemConfig:
    # service
    bind_host: str = "127.0.0.1"
    bind_port: int = 8080
    lockdown: bool = True
    debug_endpoints: bool = False
    data_dir: str = "./burstq-data"
    max_upload_bytes: int = 256 * 1024 * 1024
    durable_fsync: bool = True
    # routing
    local_marker_threshold: int = 100
    big_memory_marker_threshold: int = 1200
    max_marker_capacity: int = 5000
    gb_per_core: float = 4.0
    gb_at_threshold: float = 4.0
    cloud_enabled: bool = True
    # dispatch loop
    poll_interval_s: float = 1.0
    dispatch_timeout_s: float = 30.0
    max_dispatch_retries: int = 2
    max_attempts: int = 2
    # vm pool / scaling
    provider: str = "sim"  # sim | external-stub
    min_vms: int = 0
    max_vms: int = 4
    idle_grace_s: float = 120.0
    terminate_window_s: float = 300.0
    billing_period_s: float = 3600.0
    boot_budget_s: float = 90.0
    unit_price: float = 0.10
    vm_poll_interval_s: float = 5.0
    # simulated provider
    sim_transport: str = "http"  # http | direct
    sim_boot_delay_s: float = 5.0
    sim_boot_jitter_s: float = 0.0
    sim_launch_failure_rate: float = 0.0
    # local/grid tier
    max_local_jobs: int = 1
    prepare_pool_size: int = 1
    local_cores: int = 8
    remote_poll_interval_s: float = 30.0
    grid_submit_latency_small_s: float = 1.0
    grid_submit_latency_large_s: float = 10.0
    grid_size_cutoff_bytes: int = 1 << 20
    grid_queue_wait_s: float = 0.0
    grid_queue_wait_jitter_s: float = 0.0
    grid_submit_timeout_rate: float = 0.0

    @classmethod
    def load(cls, path: Optional[str] = None) -> "SystemConfig":
        if path is None:
            path = os.environ.get(ENV_VAR)
        if path is None:
            return cls()
        return cls.from_mapping(read_config_file(path))

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "SystemConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        defaults = cls()
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(defaults, key)
            try:
                if isinstance(current, bool):
                    kwargs[key] = _parse_bool(raw)
                elif isinstance(current, int):
                    kwargs[key] = int(raw)
                elif isinstance(current, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        return cls(**kwargs)

    def routing_config(self):
        from .model import RoutingConfig

        return RoutingConfig(
            local_marker_threshold=self.local_marker_threshold,
            big_memory_marker_threshold=self.big_memory_marker_threshold,
            max_marker_capacity=self.max_marker_capacity,
            gb_per_core=self.gb_per_core,
            gb_at_threshold=self.gb_at_threshold,
            cloud_enabled=self.cloud_enabled,
        )

    def scaling_config(self):
        from .pool import ScalingConfig

        return ScalingConfig(
            min_vms=self.min_vms,
            max_vms=self.max_vms,
            idle_grace=self.idle_grace_s,
            terminate_window=self.terminate_window_s,
            billing_period=self.billing_period_s,
            boot_budget=self.boot_budget_s,
            unit_price=self.unit_price,
        )

    def dispatch_config(self):
        from .dispatch import DispatchConfig

        return DispatchConfig(
            poll_interval=self.poll_interval_s,
            dispatch_timeout=self.dispatch_timeout_s,
            max_dispatch_retries=self.max_dispatch_retries,
            max_attempts=self.max_attempts,
        )

    def local_scheduler_config(self):
        from .gridlocal import GridLatencyModel, LocalSchedulerConfig

        return LocalSchedulerConfig(
            max_local_jobs=self.max_local_jobs,
            prepare_pool_size=self.prepare_pool_size,
            remote_poll_interval=self.remote_poll_interval_s,
            latency=GridLatencyModel(
                small=self.grid_submit_latency_small_s,
                large=self.grid_submit_latency_large_s,
                size_cutoff_bytes=self.grid_size_cutoff_bytes,
            ),
            max_attempts=self.max_attempts,
            cores=self.local_cores,
        )


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.split("#", 1)[0].strip()
    return out
