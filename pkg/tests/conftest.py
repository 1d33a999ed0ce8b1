"""Shared fixtures and builders for the test suite."""

import logging

import pytest

from burstq.model import (
    Backend,
    DatasetProfile,
    JobKind,
    JobRecord,
    JobSpec,
    JobState,
    VmRecord,
    VmState,
)

logging.getLogger("burstq").setLevel(logging.WARNING)


def build_job(
    backend=Backend.CLOUD,
    state=JobState.QUEUED,
    kind=JobKind.SLEEP,
    params=None,
    owner="tester",
    **kw,
):
    spec = JobSpec(
        kind=kind,
        params=params or {"duration_ms": "0"},
        profile=DatasetProfile(max_markers=500, sample_size=20),
        owner=owner,
    )
    return JobRecord(id="", spec=spec, state=state, backend=backend, **kw)


def build_vm(
    vm_id="vm0001",
    state=VmState.IDLE,
    launched=0.0,
    idle_since=None,
    handle=None,
    **kw,
):
    return VmRecord(
        id=vm_id,
        provider_handle=handle or f"h-{vm_id}",
        endpoint=f"sim://{vm_id}",
        state=state,
        launched_at=launched,
        billing_anchor=launched,
        token_secret=f"secret-{vm_id}",
        token_issued_at=launched,
        idle_since=idle_since,
        **kw,
    )


@pytest.fixture
def sim_runtime():
    from burstq.runtime import SimRuntime

    return SimRuntime()


@pytest.fixture
def sim_store(tmp_path, sim_runtime):
    from burstq.store import Store

    s = Store(tmp_path / "store", clock=sim_runtime.now, fsync=False)
    yield s
    s.close()
