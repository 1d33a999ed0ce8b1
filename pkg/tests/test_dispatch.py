"""Queue manager tests: tick loop, dispatch outcomes, failure handling."""

import pytest

from burstq.dispatch import DispatchConfig, QueueManager
from burstq.model import Backend, JobEvent, JobState, VmState
from burstq.pool import ScalingConfig, VmManager
from burstq.providers import AgentUnreachable, Provider, SimCloud, VmClient
from burstq.runtime import SimRuntime
from burstq.store import Store

from .conftest import build_job, build_vm


class ScriptedClient(VmClient):
    def __init__(self, script):
        self.script = list(script)
        self.executes = []
        self.aborts = []

    def execute(self, job_id, kind, params, inputs, callback_url, token):
        self.executes.append((job_id, token))
        outcome = self.script.pop(0) if self.script else "accepted"
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    def status(self):
        return {"mode": "idle"}

    def abort(self, job_id):
        self.aborts.append(job_id)


class ScriptedProvider(Provider):
    """Provider whose clients follow per-handle scripts. Launches are
    accepted but never finish booting, so demand signals stay inert."""

    def __init__(self):
        self.clients: dict[str, ScriptedClient] = {}
        self.launched = 0

    def client_for(self, handle):
        return self.clients.setdefault(handle, ScriptedClient([]))

    def launch(self, image_ref, size):
        self.launched += 1
        return f"pending-{self.launched}"

    def terminate(self, handle):
        pass

    def describe(self, handle):
        return "pending" if handle.startswith("pending-") else "running"

    def endpoint(self, handle):
        return f"fake://{handle}"


@pytest.fixture
def rig(tmp_path):
    rt = SimRuntime()
    store = Store(tmp_path / "store", clock=rt.now, fsync=False)
    provider = ScriptedProvider()
    pool = VmManager(store, provider, rt, ScalingConfig())
    qm = QueueManager(
        store,
        pool,
        rt,
        jobs_dir=tmp_path / "jobs",
        callback_base="http://127.0.0.1:0",
        cfg=DispatchConfig(max_attempts=2),
    )
    yield rt, store, provider, pool, qm
    store.close()


def add_idle_vm(store, vm_id="vm0001"):
    vm = build_vm(vm_id, VmState.IDLE, idle_since=0.0)
    store.vm_upsert(vm)
    return vm


class TestTick:
    def test_one_job_one_vm_dispatches(self, rig):
        rt, store, provider, pool, qm = rig
        jid = store.enqueue(build_job())
        vm = add_idle_vm(store)
        actions = qm.tick(rt.now())
        assert [a["action"] for a in actions] == ["dispatch"]
        assert actions[0]["outcome"] == "accepted"
        job = store.get_job(jid)
        assert job.state is JobState.RUNNING
        assert job.assigned_vm == vm.id
        assert store.get_vm(vm.id).state is VmState.BUSY

    def test_no_vms_signals_demand_with_depth(self, rig):
        rt, store, provider, pool, qm = rig
        for _ in range(3):
            store.enqueue(build_job())
        actions = qm.tick(rt.now())
        assert len(actions) == 1
        assert actions[0]["action"] == "demand"
        assert actions[0]["depth"] == 3

    def test_empty_queue_no_actions(self, rig):
        rt, store, provider, pool, qm = rig
        assert qm.tick(rt.now()) == []

    def test_fifo_dispatch_order(self, rig):
        rt, store, provider, pool, qm = rig
        ids = [store.enqueue(build_job()) for _ in range(3)]
        for i in range(3):
            add_idle_vm(store, f"vm000{i + 1}")
        actions = qm.tick(rt.now())
        assert [a["job"] for a in actions] == ids

    def test_head_of_line_stops_at_first_unsatisfiable(self, rig):
        rt, store, provider, pool, qm = rig
        ids = [store.enqueue(build_job()) for _ in range(3)]
        add_idle_vm(store)
        actions = qm.tick(rt.now())
        kinds = [a["action"] for a in actions]
        assert kinds == ["dispatch", "demand"]
        assert store.get_job(ids[0]).state is JobState.RUNNING
        assert store.get_job(ids[1]).state is JobState.QUEUED

    def test_grid_jobs_not_touched(self, rig):
        rt, store, provider, pool, qm = rig
        store.enqueue(build_job(backend=Backend.GRID))
        add_idle_vm(store)
        assert qm.tick(rt.now()) == []


class TestDispatchOutcomes:
    def test_busy_agent_leaves_job_queued_vm_busy(self, rig):
        rt, store, provider, pool, qm = rig
        jid = store.enqueue(build_job())
        vm = add_idle_vm(store)
        provider.clients[vm.provider_handle] = ScriptedClient(["busy"])
        actions = qm.tick(rt.now())
        assert actions[0]["outcome"] == "busy"
        assert store.get_job(jid).state is JobState.QUEUED
        assert store.get_vm(vm.id).state is VmState.BUSY

    def test_unreachable_after_retries_marks_vm_lost(self, rig):
        rt, store, provider, pool, qm = rig
        jid = store.enqueue(build_job())
        vm = add_idle_vm(store)
        provider.clients[vm.provider_handle] = ScriptedClient(
            [AgentUnreachable("x")] * 3
        )
        actions = qm.tick(rt.now())
        assert actions[0]["outcome"] == "unreachable"
        job = store.get_job(jid)
        assert job.state is JobState.QUEUED
        assert job.attempt_count == 1
        assert store.get_vm(vm.id).state is VmState.LOST

    def test_transient_unreachable_retries_within_dispatch(self, rig):
        rt, store, provider, pool, qm = rig
        store.enqueue(build_job())
        vm = add_idle_vm(store)
        client = ScriptedClient([AgentUnreachable("x"), "accepted"])
        provider.clients[vm.provider_handle] = client
        actions = qm.tick(rt.now())
        assert actions[0]["outcome"] == "accepted"
        assert len(client.executes) == 2

    def test_dispatch_token_comes_from_vm_record(self, rig):
        rt, store, provider, pool, qm = rig
        store.enqueue(build_job())
        vm = add_idle_vm(store)
        client = ScriptedClient(["accepted"])
        provider.clients[vm.provider_handle] = client
        qm.tick(rt.now())
        assert client.executes[0][1] == vm.token_secret

    def test_cancelled_between_peek_and_accept_aborts_agent(self, rig):
        rt, store, provider, pool, qm = rig
        jid = store.enqueue(build_job())
        vm = add_idle_vm(store)

        class CancellingClient(ScriptedClient):
            def execute(self, job_id, *a, **kw):
                store.update_job(
                    job_id,
                    lambda j: j.apply_event(JobEvent.CANCEL, rt.now()),
                    "JobManager",
                    "cancel mid-dispatch",
                )
                return super().execute(job_id, *a, **kw)

        client = CancellingClient(["accepted"])
        provider.clients[vm.provider_handle] = client
        actions = qm.tick(rt.now())
        assert actions[0]["outcome"] == "cancelled"
        assert client.aborts == [jid]
        assert store.get_vm(vm.id).state is VmState.IDLE


class TestAgentFailure:
    def _running_job(self, rig):
        rt, store, provider, pool, qm = rig
        jid = store.enqueue(build_job())
        vm = add_idle_vm(store)
        qm.tick(rt.now())
        return jid, vm

    def test_first_failure_requeues(self, rig):
        rt, store, provider, pool, qm = rig
        jid, vm = self._running_job(rig)
        qm.handle_agent_failure(jid, vm.id, "vm died")
        job = store.get_job(jid)
        assert job.state is JobState.QUEUED
        assert job.attempt_count == 1
        assert store.get_vm(vm.id).state is VmState.LOST

    def test_second_failure_fails_job(self, rig):
        rt, store, provider, pool, qm = rig
        jid, vm = self._running_job(rig)
        qm.handle_agent_failure(jid, vm.id, "vm died")
        # second execution on a fresh vm
        vm2 = add_idle_vm(store, "vm0002")
        qm.tick(rt.now())
        assert store.get_job(jid).state is JobState.RUNNING
        qm.handle_agent_failure(jid, vm2.id, "vm died again")
        job = store.get_job(jid)
        assert job.state is JobState.FAILED
        assert job.attempt_count == 2
        assert "vm died again" in job.error

    def test_late_report_on_terminal_job_is_ignored(self, rig):
        rt, store, provider, pool, qm = rig
        jid, vm = self._running_job(rig)
        store.update_job(
            jid,
            lambda j: j.apply_event(JobEvent.RESULTS_RECEIVED, rt.now()),
            "JobManager",
            "done",
        )
        rev = store.revision
        qm.handle_agent_failure(jid, vm.id, "stale report")
        assert store.get_job(jid).state is JobState.COMPLETED
        assert store.revision == rev  # audit note only, no mutation
        notes = [e for e in store.journal_entries() if e.get("kind") == "note"]
        assert any("late failure report" in n["desc"] for n in notes)


class TestLiveness:
    def test_dispatch_within_two_poll_intervals(self, tmp_path):
        """With one healthy VM and a queued job, a dispatch happens within
        two poll intervals of the simulated loop."""
        rt = SimRuntime()
        store = Store(tmp_path / "store", clock=rt.now, fsync=False)
        provider = SimCloud(
            rt, transport="direct", push_transport=lambda u, t, b: 200
        )
        pool = VmManager(store, provider, rt, ScalingConfig())
        qm = QueueManager(
            store, pool, rt, tmp_path / "jobs", "direct://", DispatchConfig()
        )
        from burstq.runtime import PeriodicTask

        PeriodicTask(rt, 1.0, lambda now: qm.tick(now)).start()
        PeriodicTask(rt, 1.0, lambda now: pool.tick(now)).start()
        store.enqueue(build_job(params={"duration_ms": "60000"}))
        rt.run_until(0.0)  # first ticks: demand -> launch -> idle
        submitted_at = rt.now()
        rt.run_until(submitted_at + 2 * 1.0)
        dispatches = [a for a in qm.trace if a["action"] == "dispatch"]
        assert len(dispatches) == 1
        assert dispatches[0]["t"] - submitted_at <= 2.0
        store.close()
