from __future__ import annotations

import json
import os
import time
from pathlib import Path

import psutil
import pytest
from conftest import BELL, write_payload

from vqpu.agent.config import AgentConfig, ConfigError
from vqpu.agent.controller import (
    ACTIVE,
    ORPHANED,
    FINALISED_FILE,
    Agent,
    Backoff,
    classify,
    prepare_run_dir,
)
from vqpu.agent.main import gc
from vqpu.errors import (
    ARTIFACT_MALFORMED,
    ARTIFACT_MISSING,
    JOB_KILLED,
    JOB_NEVER_STARTED,
    RUNNER_EXCEPTION,
)
from vqpu.fixtures import IDEAL_DEVICE, NOISY_DEVICE
from vqpu.harness import AgentProcess, free_port
from vqpu.rundir import ERROR_FILE, META_FILE, RESULT_FILE, TIMINGS_FILE, ExecutionPayload
from vqpu.runner import execute
from vqpu.scheduler import KILLED, NEVER_STARTED, FaultPlan, SimulatedScheduler, TerminalRecord

GROUND = "qubits 2\nmeasure 0\nmeasure 1"


def wait_for(predicate, timeout: float = 30.0, interval: float = 0.1):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not reached in time")


def config(server, tmp_path: Path, agent_id: str = "ag", **kw) -> AgentConfig:
    return AgentConfig(
        server_url=server.url,
        api_key=server.keys.agent,
        agent_id=agent_id,
        work_dir=str(tmp_path / agent_id),
        **kw,
    )


def virtual_agent(server, tmp_path, plan: dict | None = None, agent_id: str = "ag") -> tuple[Agent, SimulatedScheduler]:
    backend = SimulatedScheduler(FaultPlan.from_dict(plan or {}), mode="virtual")
    return Agent(config(server, tmp_path, agent_id), backend=backend), backend


def claim_and_launch(agent: Agent) -> str:
    grant = agent.client.claim(agent.config.agent_id)
    assert grant is not None
    agent._launch(grant)
    return grant["task"]["task_id"]


# -- classification --------------------------------------------------------


@pytest.fixture
def ran(tmp_path, ideal):
    run_dir = tmp_path / "run"
    payload = write_payload(run_dir, ideal, source=GROUND, shots=10, seed=3)
    assert execute(run_dir) == 0
    return run_dir, payload


def test_classify_completed_merges_timings(ran):
    run_dir, payload = ran
    term = TerminalRecord("j1", "COMPLETED", "exit code 0", 1.0, 2.0)
    kind, result = classify(run_dir, payload, term)
    assert kind == "completed"
    assert result["counts"] == {"00": 10}
    assert set(result["timings"]) == {"parse_s", "noise_build_s", "transpile_s", "simulate_s"}
    assert result["scheduler"]["job_id"] == "j1"


def test_classify_rejects_result_from_another_claim(ran):
    run_dir, payload = ran
    other = ExecutionPayload(**{**payload.__dict__, "claimed_at": "2030-01-01T00:00:00.000000Z"})
    kind, env = classify(run_dir, other, None)
    assert (kind, env["code"]) == ("failed", ARTIFACT_MALFORMED)
    (run_dir / RESULT_FILE).write_text("{broken")
    assert classify(run_dir, payload, None)[1]["code"] == ARTIFACT_MALFORMED


def test_classify_runner_error_and_missing_artifacts(tmp_path, ideal):
    run_dir = tmp_path / "r"
    payload = write_payload(run_dir, ideal)
    (run_dir / ERROR_FILE).write_text(json.dumps({"code": "QUBIT_OFFLINE", "message": "q3"}))
    kind, env = classify(run_dir, payload, None)
    assert env["code"] == RUNNER_EXCEPTION and env["detail"]["runner_error"]["code"] == "QUBIT_OFFLINE"
    (run_dir / ERROR_FILE).unlink()
    cases = [
        (TerminalRecord("j", KILLED, "killed"), JOB_KILLED),
        (TerminalRecord("j", NEVER_STARTED), JOB_NEVER_STARTED),
        (TerminalRecord("j", "COMPLETED"), ARTIFACT_MISSING),
        (None, ARTIFACT_MISSING),
    ]
    for term, code in cases:
        kind, env = classify(run_dir, payload, term)
        assert (kind, env["code"]) == ("failed", code)


def test_prepare_run_dir_archives_previous_attempts(tmp_path):
    first = prepare_run_dir(tmp_path, "t")
    (first / "marker").write_text("1")
    prepare_run_dir(tmp_path, "t")
    prepare_run_dir(tmp_path, "t")
    assert (tmp_path / "t.attempt-1" / "marker").exists()
    assert (tmp_path / "t.attempt-2").is_dir()
    assert list((tmp_path / "t").iterdir()) == []


def test_backoff_grows_to_cap():
    b = Backoff(base=1.0, cap=8.0, jitter=0.0)
    assert [b.next_delay() for _ in range(6)] == [1, 2, 4, 8, 8, 8]
    b.reset()
    assert b.next_delay() == 1


def test_config_validation(tmp_path):
    base = {"server_url": "http://x", "api_key": "k", "agent_id": "a", "work_dir": str(tmp_path)}
    assert AgentConfig.from_dict(base).max_slots == 2
    for bad in (
        {**base, "agent_id": ""},
        {**base, "max_slots": 0},
        {**base, "heartbeat_interval_s": 0},
        {**base, "colour": "blue"},
        {**base, "backend": {"kind": "slurm"}},
        {**base, "backend": {"kind": "simulated", "clock": "virtual"}},
        {**base, "backend": {"kind": "simulated", "fault_plan": {"capacity": 0}}},
    ):
        with pytest.raises(ConfigError):
            AgentConfig.from_dict(bad)


def test_gc_removes_only_finalised_dirs(tmp_path):
    (tmp_path / "done").mkdir()
    (tmp_path / "done" / FINALISED_FILE).write_text("{}")
    (tmp_path / "live").mkdir()
    assert gc(tmp_path, 0, dry_run=True) == [tmp_path / "done"]
    assert (tmp_path / "done").exists()
    gc(tmp_path, 0)
    assert not (tmp_path / "done").exists() and (tmp_path / "live").exists()


# -- against a real control plane ------------------------------------------


def test_claim_execute_publish(server, tmp_path):
    user = server.client("user")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=64, seed=1)
    agent, backend = virtual_agent(server, tmp_path, {"queue_delay": 1.0})
    task_id = claim_and_launch(agent)
    assert task_id == rec["task_id"]
    assert user.get_task(task_id)["scheduler_job_id"] == "sim-1"
    assert json.loads((agent.work_dir / task_id / META_FILE).read_text())["scheduler_job_id"] == "sim-1"
    agent.finalise_once()
    assert agent.owned() == {task_id: ACTIVE}  # still in the scheduler queue
    backend.advance(1.0)
    agent.finalise_once()
    done = user.get_task(task_id)
    assert done["state"] == "COMPLETED" and done["result"]["counts"] == {"00": 64}
    assert done["result"]["timings"]["simulate_s"] >= 0
    assert agent.owned() == {}
    assert (agent.work_dir / task_id / FINALISED_FILE).exists()
    agent.stop()


@pytest.mark.parametrize(
    "injection, code",
    [
        ({"fault": "KILL_AFTER", "match": 1, "duration": 0.5}, JOB_KILLED),
        ({"fault": "NEVER_START", "match": 1}, JOB_NEVER_STARTED),
        ({"fault": "LOSE_ARTIFACT", "match": 1}, ARTIFACT_MISSING),
    ],
)
def test_scheduler_faults_become_failure_codes(server, tmp_path, injection, code):
    user = server.client("user")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=8)
    agent, backend = virtual_agent(server, tmp_path, {"run_duration": 1.0, "injections": [injection]})
    claim_and_launch(agent)
    backend.advance(2.0)
    agent.finalise_once()
    task = user.get_task(rec["task_id"])
    assert task["state"] == "FAILED" and task["error"]["code"] == code
    agent.stop()


def test_offline_qubit_in_bound_snapshot_fails_in_runner(server, tmp_path, noisy):
    user, admin = server.client("user"), server.client("admin")
    rec = user.submit("qubits 4\nsx 3", NOISY_DEVICE, shots=8)
    d = noisy.to_dict()
    d["qubits"][3]["state"] = "OFFLINE"
    admin.put_device(NOISY_DEVICE, d)
    agent, backend = virtual_agent(server, tmp_path)
    claim_and_launch(agent)
    backend.advance(0)
    agent.finalise_once()
    task = user.get_task(rec["task_id"])
    assert task["error"]["code"] == RUNNER_EXCEPTION
    assert task["error"]["detail"]["runner_error"]["code"] == "QUBIT_OFFLINE"
    agent.stop()


def test_heartbeat_and_ownership_loss(server, tmp_path):
    user, admin = server.client("user"), server.client("admin")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=8)
    agent, backend = virtual_agent(server, tmp_path, {"queue_delay": 5.0})
    task_id = claim_and_launch(agent)
    assert agent.heartbeat_once() == {task_id: "OK"}
    admin.requeue(task_id)
    assert agent.heartbeat_once() == {task_id: "ILLEGAL_TRANSITION"}
    assert agent.owned() == {task_id: "abandoned"}
    assert agent.heartbeat_once() == {}  # abandoned tasks are not asserted
    backend.advance(10)
    agent.finalise_once()
    assert agent.owned() == {}
    assert user.get_task(rec["task_id"])["state"] == "QUEUED"
    assert admin.audit() == []  # nothing was published for the lost task
    agent.stop()


def test_handoff_after_requeue_absorbs_the_late_report(server, tmp_path):
    user, admin = server.client("user"), server.client("admin")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=8)
    old, old_backend = virtual_agent(server, tmp_path, agent_id="old")
    claim_and_launch(old)
    old_backend.advance(0)  # the job finishes but the agent has not finalised
    admin.requeue(rec["task_id"])
    new, new_backend = virtual_agent(server, tmp_path, agent_id="new")
    claim_and_launch(new)
    new_backend.advance(0)
    new.finalise_once()
    old.finalise_once()
    assert user.get_task(rec["task_id"])["owner"] == "new"
    assert user.get_task(rec["task_id"])["state"] == "COMPLETED"
    assert old.stats["absorbed"] == 1
    assert [e["rejected_with"] for e in admin.audit()] == ["ILLEGAL_TRANSITION"]
    old.stop()
    new.stop()


def test_restart_recovers_completed_but_unreported_dir(server, tmp_path):
    user = server.client("user")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=16)
    first, backend = virtual_agent(server, tmp_path, agent_id="r1")
    task_id = claim_and_launch(first)
    backend.advance(0)  # result.json written; process "crashes" before publishing
    first.client.close()

    again = Agent(config(server, tmp_path, "r1"), backend=SimulatedScheduler(FaultPlan(), mode="virtual"))
    again.recover_on_restart()
    assert again.recovered.is_set()
    task = user.get_task(rec["task_id"])
    assert task["state"] == "COMPLETED" and task["result"]["counts"] == {"00": 16}
    assert again.owned() == {}
    assert task_id == rec["task_id"]
    again.stop()


def test_restart_without_evidence_only_heartbeats(server, tmp_path):
    user = server.client("user")
    rec = user.submit(GROUND, IDEAL_DEVICE, shots=16)
    agent_client = server.client("agent")
    agent_client.claim("r2")  # claimed, but nothing ever written locally
    agent = Agent(config(server, tmp_path, "r2"), backend=SimulatedScheduler(FaultPlan(), mode="virtual"))
    agent.recover_on_restart()
    assert agent.owned() == {rec["task_id"]: ORPHANED}
    assert agent.heartbeat_once() == {rec["task_id"]: "OK"}
    agent.finalise_once()
    assert user.get_task(rec["task_id"])["state"] == "RUNNING"
    agent.stop()


def test_running_agent_respects_slots(server, tmp_path):
    user = server.client("user")
    ids = [user.submit(GROUND, IDEAL_DEVICE, shots=8)["task_id"] for _ in range(5)]
    cfg = config(
        server,
        tmp_path,
        "slots",
        max_slots=2,
        claim_wait_s=1.0,
        heartbeat_interval_s=0.5,
        finalise_interval_s=0.05,
        backend={"kind": "simulated", "fault_plan": {"run_duration": 0.6}},
    )
    agent = Agent(cfg)
    agent.start()
    peak = 0
    try:
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            tasks = [user.get_task(i) for i in ids]
            peak = max(peak, sum(t["state"] == "RUNNING" for t in tasks))
            if all(t["state"] == "COMPLETED" for t in tasks):
                break
            time.sleep(0.05)
    finally:
        agent.stop()
    assert all(user.get_task(i)["state"] == "COMPLETED" for i in ids)
    assert 1 <= peak <= 2
    assert agent.stats["claims"] == 5


def test_unreachable_server_backs_off(tmp_path):
    cfg = AgentConfig(
        server_url=f"http://127.0.0.1:{free_port()}",
        api_key="k",
        agent_id="lonely",
        work_dir=str(tmp_path / "w"),
        backoff_base_s=0.2,
        backoff_cap_s=0.4,
        request_timeout_s=1.0,
    )
    agent = Agent(cfg, backend=SimulatedScheduler(FaultPlan(), mode="virtual"))
    calls = []
    original = agent.client.list_tasks

    def counting(*a, **kw):
        calls.append(time.monotonic())
        return original(*a, **kw)

    agent.client.list_tasks = counting
    agent.start()
    time.sleep(2.0)
    alive = all(t.is_alive() for t in agent._threads)
    agent.stop()
    assert alive
    assert 2 <= len(calls) <= 12
    gaps = [b - a for a, b in zip(calls, calls[1:])]
    assert min(gaps) >= 0.15


def test_agent_process_opens_no_listening_socket(server, tmp_path):
    user = server.client("user")
    rec = user.submit(BELL, NOISY_DEVICE, shots=32)
    agent = AgentProcess(
        tmp_path / "proc",
        server.url,
        server.keys.agent,
        "proc-agent",
        backend={"kind": "simulated", "fault_plan": {"run_duration": 1.0}},
    ).start()
    try:
        wait_for(lambda: user.get_task(rec["task_id"])["state"] == "RUNNING")
        proc = psutil.Process(agent.proc.pid)
        family = [proc, *proc.children(recursive=True)]
        listening = [c for p in family for c in p.net_connections(kind="inet") if c.status == psutil.CONN_LISTEN]
        assert listening == []
        outbound = [c for c in proc.net_connections(kind="inet") if c.raddr]
        assert all(c.raddr.port == server.port for c in outbound)
        wait_for(lambda: user.get_task(rec["task_id"])["state"] == "COMPLETED")
    finally:
        agent.stop()
    assert agent.proc.returncode == 0
    assert os.path.exists(agent.work_dir / rec["task_id"] / TIMINGS_FILE)
