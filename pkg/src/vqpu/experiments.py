"""End-to-end experiments driven through the public HTTP API.

Each experiment talks to a running control plane (``cluster`` provides
``url``, ``keys`` and ``client(role)``, see :mod:`vqpu.harness`), launches
its own agent processes under ``work_root``, and returns a JSON-serialisable
report whose ``verdict`` is ``"PASS"`` or ``"FAIL"``.
"""

from __future__ import annotations

import contextlib
import heapq
import math
import statistics
import time
from collections import Counter
from pathlib import Path
from typing import Any, Callable

from .circuit import parse
from .client import Client
from .device import DeviceSnapshot, build_noise_model
from .errors import parse_ts
from .fixtures import IDEAL_DEVICE, NOISY_DEVICE, load_fixture
from .harness import AgentProcess
from .lifecycle import TASK_COMPLETED, TASK_REQUEUED, TASK_RUNNING, TERMINAL
from .sim import SimulationRequest, density_oracle, run, tv_from_counts
from .workloads import amplified_identity, random_dense_circuit, random_native_circuit

ALL_ZEROS = {"00": 1.0}


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def wait_terminal(client: Client, task_ids: list[str], timeout: float) -> dict[str, dict[str, Any]]:
    """Long-poll each task until terminal; unfinished tasks keep their last record."""
    deadline = time.monotonic() + timeout
    out: dict[str, dict[str, Any]] = {}
    for tid in task_ids:
        while True:
            remaining = deadline - time.monotonic()
            rec = client.get_task(tid, wait_s=max(0.0, min(remaining, 10.0)))
            out[tid] = rec
            if rec["state"] in TERMINAL or remaining <= 0:
                break
    return out


def collect_events(client: Client, after: int, upto: int, timeout: float = 30.0) -> list[dict[str, Any]]:
    """Replay events ``after+1 .. upto`` over the event stream."""
    events: list[dict[str, Any]] = []
    if upto <= after:
        return events
    stream = client.events(from_sequence=after, read_timeout=timeout)
    with contextlib.closing(stream):
        for ev in stream:
            if ev.event == "error" or ev.id is None:
                continue
            events.append(ev.data)
            if ev.id >= upto:
                break
    return events


def _seconds(a: str, b: str) -> float:
    return (parse_ts(b) - parse_ts(a)).total_seconds()


def _simulated(queue_delay: Any = 0.0, run_duration: Any = 0.0, **extra: Any) -> dict[str, Any]:
    plan = {"queue_delay": queue_delay, "run_duration": run_duration, **extra}
    return {"kind": "simulated", "fault_plan": plan}


# -- claim-time binding ------------------------------------------------


def exp_binding(cluster, work_root: Path, *, tasks: int = 8, shots: int = 8192) -> dict[str, Any]:
    """Mutate a device while tasks wait in the queue; results must follow the mutation."""
    started = time.monotonic()
    admin, user = cluster.client("admin"), cluster.client("user")
    original = admin.get_device(NOISY_DEVICE, authoritative=True)
    agent = AgentProcess(
        work_root / "binding", cluster.url, cluster.keys.agent, "agent-binding",
        max_slots=4, backend=_simulated(queue_delay=2.0),
    )
    try:
        source = amplified_identity()
        ids = [user.submit(source, NOISY_DEVICE, shots, seed=7000 + i)["task_id"] for i in range(tasks)]
        time.sleep(1.0)
        queued_at_mutation = all(user.get_task(t)["state"] == "QUEUED" for t in ids)
        zeroed = DeviceSnapshot.from_dict(original).zero_noise().to_dict()
        mutated = admin.put_device(NOISY_DEVICE, zeroed)
        agent.start()
        records = wait_terminal(user, ids, timeout=60.0)
    finally:
        agent.stop()
        admin.put_device(NOISY_DEVICE, original)

    rows = []
    for tid in ids:
        rec = records[tid]
        counts = (rec.get("result") or {}).get("counts", {})
        rows.append(
            {
                "task_id": tid,
                "state": rec["state"],
                "bound_version": (rec.get("bound_snapshot") or {}).get("snapshot_version"),
                "counts": counts,
                "tv": tv_from_counts(counts, ALL_ZEROS) if counts else None,
                "p00": counts.get("00", 0) / shots if counts else None,
            }
        )
    runtime = time.monotonic() - started
    ok = (
        queued_at_mutation
        and all(r["state"] == "COMPLETED" for r in rows)
        and all(r["tv"] == 0.0 and r["p00"] == 1.0 for r in rows)
        and all(r["bound_version"] == mutated["snapshot_version"] for r in rows)
        and runtime < 60.0
    )
    return {
        "experiment": "binding",
        "verdict": _verdict(ok),
        "queued_at_mutation": queued_at_mutation,
        "mutated_version": mutated["snapshot_version"],
        "tasks": rows,
        "runtime_s": runtime,
    }


# -- cross-device fidelity ---------------------------------------------


def exp_fidelity(cluster, work_root: Path, *, pairs: int = 8, shots: int = 8192) -> dict[str, Any]:
    """Interleave the noisy and ideal fixtures; compare with the density-matrix oracle."""
    started = time.monotonic()
    user = cluster.client("user")
    agent = AgentProcess(
        work_root / "fidelity", cluster.url, cluster.keys.agent, "agent-fidelity",
        max_slots=4, backend=_simulated(queue_delay=0.1),
    ).start()
    source = amplified_identity()
    circuit = parse(source)
    try:
        plan = [(NOISY_DEVICE if i % 2 == 0 else IDEAL_DEVICE, 9100 + i) for i in range(2 * pairs)]
        ids = [user.submit(source, dev, shots, seed=seed)["task_id"] for dev, seed in plan]
        records = wait_terminal(user, ids, timeout=180.0)
    finally:
        agent.stop()

    rows = []
    for (device_id, seed), tid in zip(plan, ids):
        rec = records[tid]
        row: dict[str, Any] = {"task_id": tid, "device_id": device_id, "seed": seed, "state": rec["state"]}
        if rec["state"] == "COMPLETED":
            bound = DeviceSnapshot.from_dict(rec["bound_snapshot"])
            expected = 1.0 - density_oracle(circuit, build_noise_model(bound))["00"]
            sigma = math.sqrt(max(expected * (1.0 - expected), 0.0) / shots)
            tv = tv_from_counts(rec["result"]["counts"], ALL_ZEROS)
            ok = tv == 0.0 if device_id == IDEAL_DEVICE else abs(tv - expected) <= 3 * sigma
            row.update(tv=tv, oracle_tv=expected, sigma=sigma, ok=ok)
        else:
            row["ok"] = False
        rows.append(row)
    runtime = time.monotonic() - started
    noisy = [r["tv"] for r in rows if r["device_id"] == NOISY_DEVICE and "tv" in r]
    ok = all(r["ok"] for r in rows) and runtime < 180.0
    return {
        "experiment": "fidelity",
        "verdict": _verdict(ok),
        "mean_noisy_tv": statistics.fmean(noisy) if noisy else None,
        "tasks": rows,
        "runtime_s": runtime,
    }


# -- service overhead --------------------------------------------------


def _timed_simulation(n: int, seed: int, shots: int) -> float:
    circuit = parse(random_dense_circuit(n, seed))
    noise = build_noise_model(load_fixture(IDEAL_DEVICE))
    return run(SimulationRequest(circuit, noise, shots, seed), max_qubits=n).timings.simulate_s


def simulate_scaling(qubits: range = range(14, 19), reps: int = 7, shots: int = 1024) -> dict[str, Any]:
    """Median engine time per qubit count and successive growth ratios.

    One untimed run per size comes first: the first allocation at a new
    statevector size pays page faults that later runs do not. Repetitions
    cycle through the sizes so a transient slowdown is spread across them.
    """
    for n in qubits:
        _timed_simulation(n, 499, shots)
    times: dict[int, list[float]] = {n: [] for n in qubits}
    for r in range(reps):
        for n in qubits:
            times[n].append(_timed_simulation(n, 500 + r, shots))
    medians = {n: statistics.median(t) for n, t in times.items()}
    ns = list(qubits)
    ratios = {f"{a}->{b}": medians[b] / medians[a] for a, b in zip(ns, ns[1:])}
    return {"simulate_s": medians, "ratios": ratios}


def exp_latency(
    cluster,
    work_root: Path,
    *,
    qubits: range = range(4, 11),
    reps: int = 5,
    shots: int = 1024,
    scaling: Callable[[], dict[str, Any]] = simulate_scaling,
) -> dict[str, Any]:
    """Decompose end-to-end latency; admission and polling must not grow with n."""
    started = time.monotonic()
    user = cluster.client("user")
    snapshot = load_fixture(NOISY_DEVICE)
    agent = AgentProcess(
        work_root / "latency", cluster.url, cluster.keys.agent, "agent-latency",
        max_slots=1, backend=_simulated(),
    ).start()
    samples: dict[int, list[dict[str, float]]] = {n: [] for n in qubits}
    try:
        for rep in range(reps):
            # interleave qubit counts so slow drift does not masquerade as growth
            for n in qubits:
                source = random_native_circuit(snapshot, n, seed=1000 * rep + n)
                t0 = time.time()
                tid = user.submit(source, NOISY_DEVICE, shots, seed=rep)["task_id"]
                t_admit = time.time() - t0
                while True:
                    rec = user.get_task(tid, wait_s=20.0)
                    t_seen = time.time()
                    if rec["state"] in TERMINAL:
                        break
                if rec["state"] != "COMPLETED":
                    raise RuntimeError(f"latency task {tid} ended {rec['state']}: {rec.get('error')}")
                terminal = parse_ts(rec["terminal_at"]).timestamp()
                samples[n].append(
                    {
                        "admit": t_admit,
                        "queue_claim": _seconds(rec["created_at"], rec["claimed_at"]),
                        "exec": _seconds(rec["claimed_at"], rec["terminal_at"]),
                        "poll": t_seen - terminal,
                        "simulate": rec["result"].get("timings", {}).get("simulate_s"),
                    }
                )
    finally:
        agent.stop()

    table = {
        n: {k: statistics.median(s[k] for s in samples[n]) for k in ("admit", "queue_claim", "exec", "poll")}
        for n in qubits
    }
    admit = [table[n]["admit"] for n in qubits]
    poll = [table[n]["poll"] for n in qubits]
    admit_ratio = max(admit) / min(admit)
    poll_ratio = max(poll) / min(poll)
    sweep = scaling()
    ratios_ok = all(1.5 <= r <= 3.0 for r in sweep["ratios"].values())
    runtime = time.monotonic() - started
    ok = admit_ratio < 2.0 and poll_ratio < 2.0 and ratios_ok and runtime < 300.0
    return {
        "experiment": "latency",
        "verdict": _verdict(ok),
        "median_s": table,
        "admit_max_min_ratio": admit_ratio,
        "poll_max_min_ratio": poll_ratio,
        "simulate_scaling": sweep,
        "runtime_s": runtime,
    }


# -- crash recovery ----------------------------------------------------


def exp_recovery(cluster, work_root: Path, *, tasks: int = 3, shots: int = 1024) -> dict[str, Any]:
    """Kill an agent mid-run; tasks stay RUNNING until an operator requeues them."""
    started = time.monotonic()
    admin, user = cluster.client("admin"), cluster.client("user")
    window = float(admin.stale()["liveness_window_s"])
    first_seq = user.health()["last_sequence"]
    root = work_root / "recovery"
    settings = dict(max_slots=tasks, heartbeat_interval_s=min(1.0, window / 4))
    agent = AgentProcess(
        root, cluster.url, cluster.keys.agent, "agent-recovery",
        backend=_simulated(queue_delay=0.2, run_duration=600.0), **settings,
    )
    restarted = None
    report: dict[str, Any] = {"experiment": "recovery", "liveness_window_s": window}
    try:
        source = amplified_identity()
        ids = [user.submit(source, NOISY_DEVICE, shots, seed=300 + i)["task_id"] for i in range(tasks)]
        agent.start()
        deadline = time.monotonic() + 30.0
        while time.monotonic() < deadline:
            recs = [user.get_task(t) for t in ids]
            if all(r["state"] == "RUNNING" and r["scheduler_job_id"] for r in recs):
                break
            time.sleep(0.1)
        owners = {r["task_id"]: r["owner"] for r in recs}
        report["running_before_kill"] = all(r["state"] == "RUNNING" for r in recs)

        agent.crash()
        killed_at = time.monotonic()
        time.sleep(0.5)
        report["stale_right_after_kill"] = sorted(r["task_id"] for r in admin.stale()["tasks"])

        held = True
        stale_after_window: set[str] = set()
        while time.monotonic() < killed_at + 2 * window:
            for r in (user.get_task(t) for t in ids):
                held &= r["state"] == "RUNNING" and r["owner"] == owners[r["task_id"]]
            if time.monotonic() >= killed_at + window:
                stale_after_window |= {r["task_id"] for r in admin.stale()["tasks"]}
            time.sleep(0.25)
        report["held_running_for_2x_window"] = held
        report["stale_after_window"] = sorted(stale_after_window & set(ids))

        for t in ids:
            admin.requeue(t)
        restarted = AgentProcess(
            root, cluster.url, cluster.keys.agent, "agent-recovery",
            backend=_simulated(queue_delay=0.2, run_duration=0.2), **settings,
        ).start()
        records = wait_terminal(user, ids, timeout=60.0)
    finally:
        agent.crash()
        if restarted is not None:
            restarted.stop()

    last_seq = user.health()["last_sequence"]
    events = [e for e in collect_events(user, first_seq, last_seq) if e["task_id"] in ids]
    completed = Counter(e["task_id"] for e in events if e["event_type"] == TASK_COMPLETED)
    requeued = Counter(e["task_id"] for e in events if e["event_type"] == TASK_REQUEUED)
    runtime = time.monotonic() - started
    report.update(
        states={t: records[t]["state"] for t in ids},
        completed_events=dict(completed),
        requeue_events=dict(requeued),
        runtime_s=runtime,
    )
    ok = (
        report["running_before_kill"]
        and not report["stale_right_after_kill"]
        and held
        and set(report["stale_after_window"]) == set(ids)
        and all(records[t]["state"] == "COMPLETED" for t in ids)
        and all(completed[t] == 1 and requeued[t] == 1 for t in ids)
        and runtime < 120.0
    )
    report["verdict"] = _verdict(ok)
    return report


# -- exactly-once under concurrency ------------------------------------


def list_schedule_makespan(durations: list[float], slots: int) -> float:
    """Greedy list schedule: each job goes to the earliest-free slot, in order."""
    free = [0.0] * slots
    for d in durations:
        heapq.heapreplace(free, free[0] + d)
    return max(free)


def exp_concurrency(
    cluster,
    work_root: Path,
    *,
    tasks: int = 50,
    agents: int = 2,
    slots: int = 2,
    queue_delay: float = 1.0,
    run_duration: float = 3.0,
    shots: int = 1024,
) -> dict[str, Any]:
    """Several agents race for one queue; every task must run exactly once."""
    started = time.monotonic()
    user = cluster.client("user")
    first_seq = user.health()["last_sequence"]
    snapshot = load_fixture(NOISY_DEVICE)
    procs = [
        AgentProcess(
            work_root / "concurrency" / f"agent-{k + 1}", cluster.url, cluster.keys.agent, f"agent-{k + 1}",
            max_slots=slots, backend=_simulated(queue_delay=queue_delay, run_duration=run_duration),
        ).start()
        for k in range(agents)
    ]
    try:
        time.sleep(3.0)  # let both agents reach their claim loop
        sources = [random_native_circuit(snapshot, 5, seed=4000 + i) for i in range(tasks)]
        t_first = time.time()
        ids = [user.submit(src, NOISY_DEVICE, shots, seed=i)["task_id"] for i, src in enumerate(sources)]
        records = wait_terminal(user, ids, timeout=240.0)
    finally:
        for p in procs:
            p.stop()

    last_seq = user.health()["last_sequence"]
    mine = set(ids)
    events = [e for e in collect_events(user, first_seq, last_seq) if e["task_id"] in mine]
    claims = Counter(e["task_id"] for e in events if e["event_type"] == TASK_RUNNING)
    terminals = Counter(e["task_id"] for e in events if e["event_type"] in ("TASK_COMPLETED", "TASK_FAILED"))
    claim_owner = {e["task_id"]: e["payload"].get("owner") for e in events if e["event_type"] == TASK_RUNNING}
    final_owner = {e["task_id"]: e["payload"].get("owner") for e in events if e["event_type"] == TASK_COMPLETED}
    per_agent = Counter(claim_owner.values())

    last_terminal = max(parse_ts(r["terminal_at"]).timestamp() for r in records.values() if r["terminal_at"])
    wall = last_terminal - t_first
    floor = list_schedule_makespan([queue_delay + run_duration] * tasks, agents * slots)
    runtime = time.monotonic() - started
    completed = sum(r["state"] == "COMPLETED" for r in records.values())
    owners_consistent = all(
        claim_owner.get(t) == final_owner.get(t) == records[t]["owner"] for t in ids
    )
    ok = (
        completed == tasks
        and all(claims[t] == 1 for t in ids)
        and all(terminals[t] == 1 for t in ids)
        and owners_consistent
        and all(per_agent.get(p.agent_id, 0) >= 1 for p in procs)
        and wall <= 1.15 * floor
        and runtime < 300.0
    )
    return {
        "experiment": "concurrency",
        "verdict": _verdict(ok),
        "completed": completed,
        "duplicate_claims": sum(c - 1 for c in claims.values() if c > 1),
        "duplicate_terminals": sum(c - 1 for c in terminals.values() if c > 1),
        "owners_consistent": owners_consistent,
        "claims_per_agent": dict(per_agent),
        "wall_s": wall,
        "floor_s": floor,
        "wall_over_floor": wall / floor,
        "run_dirs": [str(p.work_dir / t) for p in procs for t in ids if claim_owner.get(t) == p.agent_id],
        "runtime_s": runtime,
    }


EXPERIMENTS: dict[str, Callable[..., dict[str, Any]]] = {
    "binding": exp_binding,
    "fidelity": exp_fidelity,
    "latency": exp_latency,
    "recovery": exp_recovery,
    "concurrency": exp_concurrency,
}
