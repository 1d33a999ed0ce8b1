"""Job manager service and HTTP API tests."""

import io
import tarfile
from dataclasses import replace

import pytest
import requests

from burstq.errors import (
    AuthFailure,
    ConflictingResults,
    DeriveSourceNotReady,
    NoResults,
    NotFound,
    NotReady,
    OversizeRejected,
    ValidationError,
)
from burstq.httpapi import ApiServer, lockdown_allows
from burstq.manager import JobService
from burstq.model import Backend, JobEvent, JobState, VmState
from burstq.runtime import SimRuntime, ThreadRuntime
from burstq.store import Store

from .conftest import build_vm
from .oracles import FIXED_GENO, FIXED_PHENO, geno_csv, pheno_csv


@pytest.fixture
def svc(tmp_path):
    rt = SimRuntime()
    store = Store(tmp_path / "data" / "store", clock=rt.now, fsync=False)
    service = JobService(store, rt, tmp_path / "data")
    yield rt, store, service
    store.close()


def submit_scan(service, **kw):
    return service.submit(
        kind="regression-scan",
        files={"geno.csv": geno_csv(FIXED_GENO), "pheno.csv": pheno_csv(FIXED_PHENO)},
        **kw,
    )


def make_running_cloud_job(rt, store, service, vm_id="vm0001"):
    jid = submit_scan(service, backend_override="Cloud")
    vm = build_vm(vm_id, VmState.BUSY, busy_since=rt.now())
    store.vm_upsert(vm)
    store.update_job(
        jid,
        lambda j: replace(j.apply_event(JobEvent.DISPATCH, rt.now()), assigned_vm=vm.id),
        "QueueManager",
        "dispatch",
    )
    return jid, vm


class TestSubmit:
    def test_regression_scan_accepted_and_queued(self, svc):
        rt, store, service = svc
        jid = submit_scan(service)
        job = store.get_job(jid)
        assert job.state is JobState.QUEUED
        assert job.spec.profile.max_markers == 5
        assert job.spec.profile.sample_size == 12

    def test_small_scan_routes_local(self, svc):
        _, store, service = svc
        jid = submit_scan(service)
        assert store.get_job(jid).backend is Backend.LOCAL  # 5 markers

    def test_markers_param_drives_routing(self, svc):
        _, store, service = svc
        jid = service.submit(kind="sleep", params={"markers": "2000"})
        job = store.get_job(jid)
        assert job.backend is Backend.CLOUD
        assert job.core_group == 3

    def test_unknown_kind_rejected(self, svc):
        _, _, service = svc
        with pytest.raises(ValidationError):
            service.submit(kind="mystery")

    def test_scan_missing_phenotype_rejected(self, svc):
        _, _, service = svc
        with pytest.raises(ValidationError, match="pheno.csv"):
            service.submit(
                kind="regression-scan", files={"geno.csv": geno_csv(FIXED_GENO)}
            )

    def test_fewer_than_three_samples_rejected(self, svc):
        _, _, service = svc
        with pytest.raises(ValidationError, match="at least 3 samples"):
            service.submit(
                kind="regression-scan",
                files={
                    "geno.csv": geno_csv(FIXED_GENO[:2]),
                    "pheno.csv": pheno_csv(FIXED_PHENO[:2]),
                },
            )

    def test_oversize_rejected_with_capacity_bound(self, svc):
        _, _, service = svc
        with pytest.raises(OversizeRejected, match="5000"):
            service.submit(kind="sleep", params={"markers": "5001"})

    def test_upload_limit_enforced(self, tmp_path):
        rt = SimRuntime()
        store = Store(tmp_path / "s", clock=rt.now, fsync=False)
        service = JobService(store, rt, tmp_path / "d", max_upload_bytes=100)
        with pytest.raises(ValidationError, match="exceeds limit"):
            service.submit(kind="sleep", files={"big.bin": b"x" * 200})
        store.close()

    def test_derive_from_running_job_not_ready(self, svc):
        rt, store, service = svc
        jid, _ = make_running_cloud_job(rt, store, service)
        with pytest.raises(DeriveSourceNotReady):
            service.submit(kind="sleep", derive_from=jid)

    def test_derive_from_unknown_job(self, svc):
        _, _, service = svc
        with pytest.raises(ValidationError, match="unknown job"):
            service.submit(kind="sleep", derive_from="j999999")

    def test_derive_from_copies_prior_outputs_as_inputs(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        service.receive_results(
            jid, vm.token_secret, "ok", {"fprofile.tsv": b"1\t2.0\n"}, "done"
        )
        child = service.submit(kind="sleep", derive_from=jid)
        staged = service.jobs_dir / child / "inputs" / "fprofile.tsv"
        assert staged.read_bytes() == b"1\t2.0\n"
        assert "fprofile.tsv" in store.get_job(child).spec.input_names

    def test_accepted_submit_is_durably_queued(self, svc):
        """A returned id always corresponds to a committed Queued job."""
        _, store, service = svc
        jid = submit_scan(service)
        assert store.get_job(jid).state is JobState.QUEUED
        assert any(
            e.description == f"enqueue {jid}" for e in store.audit_entries()
        )


class TestStatus:
    def test_fresh_job_is_pink(self, svc):
        _, _, service = svc
        jid = submit_scan(service)
        doc = service.get_status(jid)
        assert doc["state"] == "Queued"
        assert doc["color"] == "pink"

    def test_unknown_id(self, svc):
        _, _, service = svc
        with pytest.raises(NotFound):
            service.get_status("j424242")

    def test_completed_cloud_job_is_teal(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        service.receive_results(jid, vm.token_secret, "ok", {}, "")
        doc = service.get_status(jid)
        assert doc["state"] == "Completed" and doc["color"] == "teal"

    def test_list_jobs_in_submission_order(self, svc):
        _, _, service = svc
        ids = [service.submit(kind="sleep") for _ in range(3)]
        docs = service.list_jobs()
        assert [d["id"] for d in docs] == ids


class TestReceiveResults:
    def test_ok_bundle_completes_and_releases_vm(self, svc):
        rt, store, service = svc
        released = []
        service.release_vm = released.append
        jid, vm = make_running_cloud_job(rt, store, service)
        out = service.receive_results(
            jid, vm.token_secret, "ok", {"fprofile.tsv": b"data"}, "log"
        )
        assert out == "completed"
        assert store.get_job(jid).state is JobState.COMPLETED
        assert released == [vm.id]

    def test_error_bundle_fails_job(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        out = service.receive_results(jid, vm.token_secret, "error", {}, "boom")
        assert out == "failed"
        job = store.get_job(jid)
        assert job.state is JobState.FAILED
        assert job.error == "boom"

    def test_error_without_log_rejected(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        with pytest.raises(ValidationError):
            service.receive_results(jid, vm.token_secret, "error", {}, "")

    def test_wrong_token_rejected_state_unchanged(self, svc):
        rt, store, service = svc
        jid, _ = make_running_cloud_job(rt, store, service)
        with pytest.raises(AuthFailure):
            service.receive_results(jid, "forged", "ok", {}, "")
        assert store.get_job(jid).state is JobState.RUNNING

    def test_replayed_identical_push_is_idempotent(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        bundle = dict(exit_status="ok", outputs={"a.txt": b"1"}, log_text="done")
        service.receive_results(jid, vm.token_secret, **bundle)
        rev = store.revision
        out = service.receive_results(jid, vm.token_secret, **bundle)
        assert out == "duplicate"
        assert store.revision == rev  # audit note only
        assert store.get_job(jid).state is JobState.COMPLETED

    def test_different_payload_on_terminal_job_conflicts(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        service.receive_results(jid, vm.token_secret, "ok", {"a.txt": b"1"}, "")
        with pytest.raises(ConflictingResults):
            service.receive_results(jid, vm.token_secret, "ok", {"a.txt": b"2"}, "")

    def test_unknown_job(self, svc):
        _, _, service = svc
        with pytest.raises(NotFound):
            service.receive_results("j999999", "t", "ok", {}, "")


class TestFetchResults:
    def test_round_trip_bit_exact(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        payload = {"fprofile.tsv": b"1\t0.5\n2\t0.9\n", "peak.json": b'{"marker":2}'}
        service.receive_results(jid, vm.token_secret, "ok", payload, "")
        archive = service.fetch_results(jid)
        with tarfile.open(fileobj=io.BytesIO(archive)) as tar:
            got = {m.name: tar.extractfile(m).read() for m in tar.getmembers()}
        assert got == payload

    def test_running_job_not_ready(self, svc):
        rt, store, service = svc
        jid, _ = make_running_cloud_job(rt, store, service)
        with pytest.raises(NotReady):
            service.fetch_results(jid)

    def test_cancelled_job_has_no_results(self, svc):
        _, store, service = svc
        jid = submit_scan(service)
        service.cancel(jid)
        with pytest.raises(NoResults):
            service.fetch_results(jid)


class TestCancel:
    def test_cancel_queued_job(self, svc):
        _, store, service = svc
        jid = submit_scan(service)
        assert service.cancel(jid) == "Cancelled"
        assert store.get_job(jid).state is JobState.CANCELLED

    def test_cancel_terminal_is_noop(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        service.receive_results(jid, vm.token_secret, "ok", {}, "")
        assert service.cancel(jid) == "Completed"

    def test_cancel_running_cloud_job_aborts_and_releases(self, svc):
        rt, store, service = svc
        aborted, released = [], []
        service.abort_backend[Backend.CLOUD] = lambda job: aborted.append(job.id)
        service.release_vm = released.append
        jid, vm = make_running_cloud_job(rt, store, service)
        assert service.cancel(jid) == "Cancelled"
        assert aborted == [jid]
        assert released == [vm.id]

    def test_late_push_after_cancel_conflicts(self, svc):
        rt, store, service = svc
        jid, vm = make_running_cloud_job(rt, store, service)
        service.cancel(jid)
        with pytest.raises(ConflictingResults):
            service.receive_results(jid, vm.token_secret, "ok", {"a": b"1"}, "")

    def test_cancel_unknown_job(self, svc):
        _, _, service = svc
        with pytest.raises(NotFound):
            service.cancel("j999999")


class TestLockdownPolicy:
    def test_loopback_always_allowed(self):
        assert lockdown_allows("GET", "/jobs", "127.0.0.1", lockdown=True)
        assert lockdown_allows("POST", "/jobs", "::1", lockdown=True)

    def test_remote_blocked_except_result_push(self):
        assert not lockdown_allows("GET", "/jobs", "10.0.0.5", lockdown=True)
        assert not lockdown_allows("POST", "/jobs", "10.0.0.5", lockdown=True)
        assert not lockdown_allows("DELETE", "/jobs/j1", "10.0.0.5", lockdown=True)
        assert lockdown_allows("POST", "/jobs/j000001/results", "10.0.0.5", lockdown=True)
        assert not lockdown_allows("GET", "/jobs/j000001/results", "10.0.0.5", lockdown=True)

    def test_disabled_lockdown_allows_everything(self):
        assert lockdown_allows("GET", "/jobs", "10.0.0.5", lockdown=False)


class TestHttpApi:
    @pytest.fixture
    def api(self, tmp_path):
        rt = ThreadRuntime()
        store = Store(tmp_path / "data" / "store", clock=rt.now, fsync=False)
        service = JobService(store, rt, tmp_path / "data")
        server = ApiServer(service, lockdown=True).start()
        yield rt, store, service, server
        server.stop()
        store.close()

    def test_submit_status_cancel_flow(self, api):
        rt, store, service, server = api
        resp = requests.post(
            f"{server.url}/jobs",
            data={"type": "regression-scan", "owner": "alice"},
            files={
                "geno.csv": ("geno.csv", geno_csv(FIXED_GENO)),
                "pheno.csv": ("pheno.csv", pheno_csv(FIXED_PHENO)),
            },
            timeout=5,
        )
        assert resp.status_code == 201
        jid = resp.json()["id"]

        doc = requests.get(f"{server.url}/jobs/{jid}", timeout=5).json()
        assert doc["state"] == "Queued" and doc["color"] == "pink"
        assert doc["owner"] == "alice"

        listing = requests.get(f"{server.url}/jobs", timeout=5).json()
        assert [d["id"] for d in listing] == [jid]

        resp = requests.delete(f"{server.url}/jobs/{jid}", timeout=5)
        assert resp.json()["state"] == "Cancelled"

    def test_submit_without_type_is_400(self, api):
        _, _, _, server = api
        resp = requests.post(
            f"{server.url}/jobs", files={"f": ("f", b"x")}, timeout=5
        )
        assert resp.status_code == 400
        assert resp.json()["error"] == "validation"

    def test_results_push_and_fetch_via_http(self, api):
        rt, store, service, server = api
        jid, vm = make_running_cloud_job(rt, store, service)
        resp = requests.post(
            f"{server.url}/jobs/{jid}/results",
            data={"exit_status": "ok", "log": "fine"},
            files={"out.txt": ("out.txt", b"payload")},
            headers={"Authorization": f"Bearer {vm.token_secret}"},
            timeout=5,
        )
        assert resp.status_code == 200

        archive = requests.get(f"{server.url}/jobs/{jid}/results", timeout=5)
        assert archive.status_code == 200
        assert archive.headers["Content-Type"] == "application/x-tar"
        with tarfile.open(fileobj=io.BytesIO(archive.content)) as tar:
            assert tar.extractfile("out.txt").read() == b"payload"

    def test_results_push_bad_token_is_403(self, api):
        rt, store, service, server = api
        jid, _ = make_running_cloud_job(rt, store, service)
        resp = requests.post(
            f"{server.url}/jobs/{jid}/results",
            data={"exit_status": "ok", "log": ""},
            files={"out.txt": ("out.txt", b"p")},
            headers={"Authorization": "Bearer forged"},
            timeout=5,
        )
        assert resp.status_code == 403
        assert store.get_job(jid).state is JobState.RUNNING

    def test_results_of_running_job_is_409(self, api):
        rt, store, service, server = api
        jid, _ = make_running_cloud_job(rt, store, service)
        resp = requests.get(f"{server.url}/jobs/{jid}/results", timeout=5)
        assert resp.status_code == 409
        assert resp.json()["error"] == "not_ready"

    def test_unknown_job_is_404(self, api):
        _, _, _, server = api
        assert requests.get(f"{server.url}/jobs/j424242", timeout=5).status_code == 404

    def test_vms_and_accounting_endpoints(self, api):
        _, store, _, server = api
        store.vm_upsert(build_vm())
        vms = requests.get(f"{server.url}/vms", timeout=5).json()
        assert len(vms) == 1 and vms[0]["id"] == "vm0001"
        acct = requests.get(f"{server.url}/accounting", timeout=5).json()
        assert acct["vms"] == [] and acct["jobs"] == []


class TestDebugTrace:
    def test_dispatch_trace_endpoint_when_enabled(self, tmp_path):
        from burstq.config import SystemConfig
        from burstq.service import Service

        cfg = SystemConfig(
            data_dir=str(tmp_path / "data"),
            bind_port=0,
            durable_fsync=False,
            debug_endpoints=True,
            sim_boot_delay_s=0.0,
            poll_interval_s=0.05,
            vm_poll_interval_s=0.05,
        )
        service = Service(cfg).start()
        try:
            service.service.submit(
                kind="sleep", params={"duration_ms": "0"}, backend_override="Cloud"
            )
            deadline = __import__("time").monotonic() + 5
            trace = []
            while __import__("time").monotonic() < deadline:
                trace = requests.get(
                    f"{service.url}/debug/dispatch-trace", timeout=5
                ).json()
                if any(t["action"] == "dispatch" for t in trace):
                    break
            assert any(t["action"] == "dispatch" for t in trace)
        finally:
            service.stop()

    def test_dispatch_trace_hidden_by_default(self, tmp_path):
        rt = ThreadRuntime()
        store = Store(tmp_path / "store", clock=rt.now, fsync=False)
        service = JobService(store, rt, tmp_path / "data")
        server = ApiServer(service, debug_endpoints=False).start()
        try:
            resp = requests.get(f"{server.url}/debug/dispatch-trace", timeout=5)
            assert resp.status_code == 404
        finally:
            server.stop()
            store.close()
