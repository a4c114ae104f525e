"""``vqpu``: user and operator command line.

Exit codes: 0 success, 1 the server (or client) reported an error envelope,
2 usage error, 3 ``result`` asked for a task that is not terminal yet,
4 an experiment finished with a FAIL verdict.
"""

from __future__ import annotations

import contextlib
import json
import sys
import tempfile
from pathlib import Path
from typing import Any

import click
import httpx

from .circuit import DIALECT
from .client import Client
from .errors import ErrorEnvelope, VqpuError
from .lifecycle import TERMINAL

EXIT_ERROR = 1
EXIT_NOT_TERMINAL = 3
EXIT_EXPERIMENT_FAILED = 4


class Context:
    def __init__(self, server_url: str, api_key: str | None, timeout: float, as_json: bool) -> None:
        self.server_url = server_url
        self.api_key = api_key
        self.timeout = timeout
        self.as_json = as_json

    def client(self) -> Client:
        if not self.api_key:
            raise click.UsageError("an API key is required (--api-key or VQPU_API_KEY)")
        return Client(self.server_url, self.api_key, timeout=self.timeout)


pass_ctx = click.make_pass_decorator(Context)


def _emit(ctx: Context, data: Any, human: str | None = None) -> None:
    if ctx.as_json or human is None:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
    else:
        click.echo(human)


def _fail(envelope: ErrorEnvelope) -> None:
    click.echo(json.dumps(envelope.to_dict(), sort_keys=True), err=True)
    sys.exit(EXIT_ERROR)


class _Group(click.Group):
    """Turns server errors and connection failures into an envelope on stderr."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except VqpuError as exc:
            _fail(exc.envelope())
        except httpx.HTTPError as exc:
            _fail(ErrorEnvelope("CONNECTION_ERROR", f"{type(exc).__name__}: {exc}"))


def _task_line(t: dict[str, Any]) -> str:
    owner = f" owner={t['owner']}" if t.get("owner") else ""
    return f"{t['task_id']}  {t['state']:<9} {t['device_id']} shots={t['shots']}{owner}"


@click.group(cls=_Group)
@click.option("--server-url", envvar="VQPU_SERVER_URL", default="http://127.0.0.1:8080", show_default=True)
@click.option("--api-key", envvar="VQPU_API_KEY", default=None, help="defaults to $VQPU_API_KEY")
@click.option("--timeout", type=float, default=30.0, show_default=True, help="per-request timeout in seconds")
@click.option("--json", "as_json", is_flag=True, help="print raw JSON")
@click.pass_context
def main(ctx: click.Context, server_url: str, api_key: str | None, timeout: float, as_json: bool) -> None:
    """Submit circuits to a virtual QPU and operate the service."""
    ctx.obj = Context(server_url, api_key, timeout, as_json)


# -- user verbs ----------------------------------------------------------


@main.command()
@click.argument("circuit", type=click.File("r"))
@click.option("--device", "device_id", required=True)
@click.option("--shots", type=int, default=1024, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--dialect", default=DIALECT, show_default=True)
@click.option("--wait", "wait_s", type=float, default=0.0, help="long-poll up to this many seconds for completion")
@pass_ctx
def submit(ctx: Context, circuit, device_id: str, shots: int, seed: int | None, dialect: str, wait_s: float) -> None:
    """Submit CIRCUIT (a file, or - for stdin)."""
    client = ctx.client()
    task = client.submit(circuit.read(), device_id, shots, seed=seed, dialect=dialect)
    if wait_s > 0:
        task = client.get_task(task["task_id"], wait_s=wait_s)
    _emit(ctx, task, task["task_id"] if wait_s <= 0 else _task_line(task))


@main.command()
@click.argument("circuit", type=click.File("r"))
@click.option("--device", "device_id", required=True)
@click.option("--dialect", default=DIALECT, show_default=True)
@pass_ctx
def check(ctx: Context, circuit, device_id: str, dialect: str) -> None:
    """Check CIRCUIT against the device without enqueueing it."""
    verdict = ctx.client().check(circuit.read(), device_id, dialect=dialect)
    if verdict["ok"]:
        human = "admissible"
    else:
        where = f" (line {verdict['line']})" if verdict.get("line") else ""
        human = f"{verdict['code']}{where}: {verdict['message']}"
    _emit(ctx, verdict, human)
    if not verdict["ok"]:
        sys.exit(EXIT_ERROR)


@main.command()
@click.argument("task_id")
@click.option("--wait", "wait_s", type=float, default=0.0)
@pass_ctx
def status(ctx: Context, task_id: str, wait_s: float) -> None:
    """Show a task record."""
    task = ctx.client().get_task(task_id, wait_s=wait_s)
    _emit(ctx, task, _task_line(task))


@main.command()
@click.argument("task_id")
@click.option("--wait", "wait_s", type=float, default=0.0)
@pass_ctx
def result(ctx: Context, task_id: str, wait_s: float) -> None:
    """Print the counts of a completed task (exit 3 if it is not terminal)."""
    task = ctx.client().get_task(task_id, wait_s=wait_s)
    if task["state"] not in TERMINAL:
        click.echo(f"{task_id} is {task['state']}", err=True)
        sys.exit(EXIT_NOT_TERMINAL)
    if task["state"] != "COMPLETED":
        _fail(ErrorEnvelope.from_dict(task["error"]) if task.get("error") else ErrorEnvelope(task["state"], "no result"))
    res = task["result"]
    human = "\n".join(f"{k}  {v}" for k, v in sorted(res["counts"].items(), key=lambda kv: -kv[1]))
    _emit(ctx, res, human)


@main.command()
@click.argument("task_id")
@pass_ctx
def cancel(ctx: Context, task_id: str) -> None:
    """Cancel a task you submitted."""
    task = ctx.client().cancel(task_id)
    _emit(ctx, task, _task_line(task))


@main.command("list")
@click.option("--state", default=None)
@click.option("--device", "device_id", default=None)
@click.option("--owner", default=None)
@pass_ctx
def list_tasks(ctx: Context, state: str | None, device_id: str | None, owner: str | None) -> None:
    """List tasks, optionally filtered."""
    tasks = ctx.client().list_tasks(state=state, device=device_id, owner=owner)
    _emit(ctx, tasks, "\n".join(_task_line(t) for t in tasks))


@main.command()
@click.option("--task", "task_id", default=None, help="only events for this task")
@click.option("--device", "device_id", default=None, help="only events for this device")
@click.option("--from-sequence", type=int, default=None, help="replay everything after this sequence")
@click.option("--until-terminal", is_flag=True, help="with --task, stop once the task is terminal")
@click.option("--count", type=int, default=None, help="stop after printing this many events")
@pass_ctx
def watch(
    ctx: Context,
    task_id: str | None,
    device_id: str | None,
    from_sequence: int | None,
    until_terminal: bool,
    count: int | None,
) -> None:
    """Follow the lifecycle event stream."""
    printed = 0
    if count is not None and count <= 0:
        return
    for ev in ctx.client().events(from_sequence=from_sequence):
        if ev.event == "error":
            click.echo(json.dumps(ev.data, sort_keys=True), err=True)
            continue
        data = ev.data
        if task_id and data.get("task_id") != task_id:
            continue
        if device_id and data.get("device_id") != device_id:
            continue
        if ctx.as_json:
            click.echo(json.dumps(data, sort_keys=True))
        else:
            state = data.get("payload", {}).get("state", "")
            click.echo(f"{data['sequence']:>8} {data['timestamp']} {data['event_type']:<15} {data.get('task_id') or data.get('device_id')} {state}")
        printed += 1
        if until_terminal and task_id and data.get("payload", {}).get("state") in TERMINAL:
            return
        if count is not None and printed >= count:
            return


# -- devices -------------------------------------------------------------


@main.group()
def device() -> None:
    """Inspect and manage device snapshots."""


@device.command("list")
@pass_ctx
def device_list(ctx: Context) -> None:
    devices = ctx.client().list_devices()
    lines = [f"{d['device_id']}  v{d['snapshot_version']}  {d['num_qubits']}q  {d['captured_at']}" for d in devices]
    _emit(ctx, devices, "\n".join(lines))


@device.command("get")
@click.argument("device_id")
@click.option("--authoritative", is_flag=True, help="bypass the snapshot cache")
@pass_ctx
def device_get(ctx: Context, device_id: str, authoritative: bool) -> None:
    _emit(ctx, ctx.client().get_device(device_id, authoritative=authoritative))


@device.command("history")
@click.argument("device_id")
@pass_ctx
def device_history(ctx: Context, device_id: str) -> None:
    history = ctx.client().device_history(device_id)
    _emit(ctx, history, "\n".join(f"v{d['snapshot_version']}  {d['captured_at']}" for d in history))


@device.command("put")
@click.argument("device_id")
@click.argument("descriptor", type=click.File("r"))
@pass_ctx
def device_put(ctx: Context, device_id: str, descriptor) -> None:
    """Create or replace DEVICE_ID from a JSON DESCRIPTOR file (admin)."""
    try:
        body = json.load(descriptor)
    except ValueError as exc:
        raise click.BadParameter(f"not valid JSON: {exc}") from exc
    snap = ctx.client().put_device(device_id, body)
    _emit(ctx, snap, f"{device_id} is now v{snap['snapshot_version']}")


@device.command("delete")
@click.argument("device_id")
@pass_ctx
def device_delete(ctx: Context, device_id: str) -> None:
    """Remove DEVICE_ID (admin)."""
    ctx.client().delete_device(device_id)
    _emit(ctx, {"deleted": device_id}, f"deleted {device_id}")


# -- operator verbs ------------------------------------------------------


@main.group()
def task() -> None:
    """Administrative task interventions."""


@task.command("requeue")
@click.argument("task_id")
@pass_ctx
def task_requeue(ctx: Context, task_id: str) -> None:
    t = ctx.client().requeue(task_id)
    _emit(ctx, t, _task_line(t))


@task.command("force-fail")
@click.argument("task_id")
@click.option("--message", default=None)
@click.option("--code", default=None)
@pass_ctx
def task_force_fail(ctx: Context, task_id: str, message: str | None, code: str | None) -> None:
    t = ctx.client().force_fail(task_id, message=message, code=code)
    _emit(ctx, t, _task_line(t))


@main.group()
def stale() -> None:
    """RUNNING tasks whose heartbeat is older than the liveness window."""


@stale.command("list")
@pass_ctx
def stale_list(ctx: Context) -> None:
    data = ctx.client().stale()
    lines = [f"liveness window {data['liveness_window_s']:g}s"]
    lines += [f"{_task_line(t)} last_heartbeat={t['last_heartbeat_at']}" for t in data["tasks"]]
    _emit(ctx, data, "\n".join(lines))


@main.command()
@pass_ctx
def audit(ctx: Context) -> None:
    """Rejected terminal reports (admin)."""
    entries = ctx.client().audit()
    lines = [f"{e['timestamp']} {e['task_id']} {e['agent_id']} {e['attempted']} -> {e['rejected_with']}" for e in entries]
    _emit(ctx, entries, "\n".join(lines))


# -- experiments ---------------------------------------------------------


EXPERIMENT_NAMES = ("binding", "fidelity", "latency", "recovery", "concurrency")


@main.command()
@click.argument("names", nargs=-1, type=click.Choice(EXPERIMENT_NAMES + ("all",)))
@click.option("--agent-key", envvar="VQPU_AGENT_KEY", default=None, help="run against --server-url with these keys")
@click.option("--admin-key", envvar="VQPU_ADMIN_KEY", default=None)
@click.option("--work-dir", type=click.Path(file_okay=False), default=None, help="keep agent run directories here")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="write the JSON report here")
@click.option("--liveness-window", type=float, default=5.0, show_default=True, help="for a private server")
@pass_ctx
def exp(
    ctx: Context,
    names: tuple[str, ...],
    agent_key: str | None,
    admin_key: str | None,
    work_dir: str | None,
    out: str | None,
    liveness_window: float,
) -> None:
    """Run end-to-end experiments.

    With --agent-key (plus --admin-key and --api-key for the user role) the
    experiments drive the server at --server-url; otherwise a private local
    server is started for the duration of the run.
    """
    from .experiments import EXPERIMENTS
    from .harness import Endpoint, Keys, local_cluster

    selected = list(EXPERIMENT_NAMES) if not names or "all" in names else list(dict.fromkeys(names))
    with tempfile.TemporaryDirectory(prefix="vqpu-exp-") as tmp:
        root = Path(work_dir) if work_dir else Path(tmp)
        root.mkdir(parents=True, exist_ok=True)
        if agent_key:
            if not (admin_key and ctx.api_key):
                raise click.UsageError("an existing server needs --api-key, --agent-key and --admin-key")
            cluster_cm = contextlib.nullcontext(Endpoint(ctx.server_url, Keys(ctx.api_key, agent_key, admin_key)))
        else:
            cluster_cm = local_cluster(root / "server", liveness_window_s=liveness_window)
        reports = []
        with cluster_cm as cluster:
            for name in selected:
                report = EXPERIMENTS[name](cluster, root)
                reports.append(report)
                click.echo(f"{name}: {report['verdict']} ({report['runtime_s']:.1f}s)", err=True)
    payload = reports[0] if len(reports) == 1 else {"reports": reports}
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    if out:
        Path(out).write_text(text + "\n")
    if ctx.as_json or not out:
        click.echo(text)
    if any(r["verdict"] != "PASS" for r in reports):
        sys.exit(EXIT_EXPERIMENT_FAILED)


if __name__ == "__main__":
    main()
