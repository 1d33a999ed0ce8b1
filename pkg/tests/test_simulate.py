"""Full-stack simulation tests: determinism, invariance, scenarios."""

from burstq.config import SystemConfig
from burstq.simulate import render_metrics, run_simulation
from burstq.workload import Arrival, WorkloadProfile, generate_workload


def sleep_arrival(t, duration_s, markers=500, override=None):
    return Arrival(
        t=t,
        kind="sleep",
        params={
            "duration_ms": str(int(duration_s * 1000)),
            "markers": str(markers),
            "samples": "10",
        },
        backend_override=override,
    )


def fast_cfg(**kw):
    defaults = dict(
        sim_boot_delay_s=0.0,
        poll_interval_s=1.0,
        vm_poll_interval_s=5.0,
        max_vms=4,
        durable_fsync=False,
    )
    defaults.update(kw)
    return SystemConfig(**defaults)


class TestDeterminism:
    def test_same_seed_byte_identical_metrics(self, tmp_path):
        schedule = [sleep_arrival(i * 30.0, 20.0) for i in range(10)]
        m1 = run_simulation(schedule, fast_cfg(), tmp_path / "a", seed=7)
        m2 = run_simulation(schedule, fast_cfg(), tmp_path / "b", seed=7)
        assert render_metrics(m1) == render_metrics(m2)

    def test_acceleration_invariance(self, tmp_path):
        """Virtual-clock soundness: pacing never changes the metrics."""
        schedule = [sleep_arrival(i * 45.0, 30.0) for i in range(6)]
        fast = run_simulation(
            schedule, fast_cfg(), tmp_path / "a", seed=3, acceleration=None
        )
        paced = run_simulation(
            schedule, fast_cfg(), tmp_path / "b", seed=3, acceleration=100000.0
        )
        assert render_metrics(fast) == render_metrics(paced)


class TestScenarios:
    def test_all_jobs_complete_on_cloud(self, tmp_path):
        schedule = [sleep_arrival(i * 10.0, 60.0) for i in range(12)]
        metrics = run_simulation(schedule, fast_cfg(), tmp_path / "a", seed=1)
        assert metrics["jobs"]["submitted"] == 12
        assert metrics["jobs"]["completed"] == 12
        assert metrics["jobs"]["by_backend"]["Cloud"]["completed"] == 12
        assert metrics["vms"]["launched"] <= 4
        assert metrics["vms"]["terminated"] == metrics["vms"]["launched"]

    def test_starved_queue_with_zero_vms(self, tmp_path):
        schedule = [sleep_arrival(0.0, 10.0), sleep_arrival(60.0, 10.0)]
        metrics = run_simulation(
            schedule,
            fast_cfg(max_vms=0),
            tmp_path / "a",
            seed=1,
            drain_cap=900.0,
        )
        assert metrics["jobs"]["completed"] == 0
        assert metrics["jobs"]["queued_at_end"] == 2
        assert metrics["queue_wait_s"]["oldest_unstarted"] > 0

        longer = run_simulation(
            schedule,
            fast_cfg(max_vms=0),
            tmp_path / "b",
            seed=1,
            drain_cap=1800.0,
        )
        assert (
            longer["queue_wait_s"]["oldest_unstarted"]
            > metrics["queue_wait_s"]["oldest_unstarted"]
        )

    def test_mixed_backends_route_and_finish(self, tmp_path):
        schedule = [
            sleep_arrival(0.0, 5.0, markers=50),      # local
            sleep_arrival(1.0, 5.0, markers=2000),    # cloud (enabled)
            sleep_arrival(2.0, 5.0, markers=50, override="Grid"),
        ]
        cfg = fast_cfg(remote_poll_interval_s=5.0)
        metrics = run_simulation(schedule, cfg, tmp_path / "a", seed=2)
        bb = metrics["jobs"]["by_backend"]
        assert bb["Local"]["completed"] == 1
        assert bb["Cloud"]["completed"] == 1
        assert bb["Grid"]["completed"] == 1

    def test_paper_daily_profile_single_day(self, tmp_path):
        """One simulated day at the documented load: everything terminal,
        cloud waits comfortably under five virtual minutes."""
        schedule = generate_workload(WorkloadProfile(), 1.0, seed=5)
        cfg = fast_cfg(sim_boot_delay_s=10.0, max_local_jobs=4)
        metrics = run_simulation(schedule, cfg, tmp_path / "a", seed=5)
        assert metrics["jobs"]["submitted"] == len(schedule)
        terminal = (
            metrics["jobs"]["completed"]
            + metrics["jobs"]["failed"]
            + metrics["jobs"]["cancelled"]
        )
        assert terminal == len(schedule)
        assert metrics["jobs"]["by_backend"]["Cloud"]["wait_mean_s"] < 300.0

    def test_scaling_log_records_decisions(self, tmp_path):
        schedule = [sleep_arrival(0.0, 30.0)]
        metrics = run_simulation(schedule, fast_cfg(), tmp_path / "a", seed=1)
        actions = [e["action"] for e in metrics["scaling_log"]]
        assert "launch" in actions
        assert "terminate" in actions or metrics["vms"]["terminated"] == 1
        for entry in metrics["scaling_log"]:
            assert {"t", "action", "vm_id", "queue_depth", "oldest_wait"} <= set(entry)
