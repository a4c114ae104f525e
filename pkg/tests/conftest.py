from __future__ import annotations

import itertools
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from vqpu.circuit import DIALECT
from vqpu.fixtures import IDEAL_DEVICE, NOISY_DEVICE, load_fixture
from vqpu.harness import Keys, ServerProcess
from vqpu.server.app import create_app
from vqpu.server.auth import KeyTable
from vqpu.server.config import ServerConfig
from vqpu.server.service import ControlPlane

_H = "rz {q} 1.5707963267948966\nsx {q}\nrz {q} 1.5707963267948966\n"
BELL = "qubits 2\n" + _H.format(q=0) + _H.format(q=1) + "cz 0 1\n" + _H.format(q=1)


class FakeClock:
    """Deterministic wall clock (for the store) and monotonic clock (for the cache)."""

    def __init__(self, start: datetime | None = None) -> None:
        self.now = start or datetime(2026, 1, 1, tzinfo=timezone.utc)
        self.mono = 1000.0

    def __call__(self) -> datetime:
        return self.now

    def monotonic(self) -> float:
        return self.mono

    def advance(self, seconds: float) -> None:
        self.now += timedelta(seconds=seconds)
        self.mono += seconds


class Ticker:
    """Store clock that moves forward a microsecond per call."""

    def __init__(self) -> None:
        self._n = itertools.count()
        self.base = datetime(2026, 1, 1, tzinfo=timezone.utc)

    def __call__(self) -> datetime:
        return self.base + timedelta(microseconds=next(self._n))


@pytest.fixture
def noisy():
    return load_fixture(NOISY_DEVICE)


@pytest.fixture
def ideal():
    return load_fixture(IDEAL_DEVICE)


@pytest.fixture
def keys() -> Keys:
    return Keys()


def make_plane(keys: Keys, tmp_path: Path | None = None, clock=None, **config) -> ControlPlane:
    cfg = ServerConfig(**config)
    if tmp_path is not None:
        cfg.store_path = str(tmp_path / "store.sqlite")
        cfg.event_log_path = str(tmp_path / "events.jsonl")
    kwargs = {}
    if clock is not None:
        kwargs = {"clock": clock, "monotonic": clock.monotonic}
    plane = ControlPlane(cfg, KeyTable.from_mapping(keys.table()), **kwargs)
    for device_id in (NOISY_DEVICE, IDEAL_DEVICE):
        plane.devices.put(device_id, load_fixture(device_id).to_dict(), by="test")
    return plane


@pytest.fixture
def plane(keys, tmp_path):
    p = make_plane(keys, tmp_path)
    yield p
    p.close()


class Api:
    """TestClient with one bearer key per role."""

    def __init__(self, http: TestClient, keys: Keys) -> None:
        self.http = http
        self.keys = keys

    def __call__(self, method: str, path: str, role: str = "user", **kw):
        headers = {"Authorization": f"Bearer {getattr(self.keys, role)}"}
        return self.http.request(method, path, headers=headers, **kw)


@pytest.fixture
def api(plane, keys):
    with TestClient(create_app(plane)) as http:
        yield Api(http, keys)


@pytest.fixture
def server(tmp_path_factory):
    """A real server process with a short liveness window."""
    root = tmp_path_factory.mktemp("server")
    proc = ServerProcess(root, liveness_window_s=2.0).start()
    yield proc
    proc.stop()


def write_payload(run_dir: Path, snapshot, source: str = BELL, shots: int = 100, seed: int = 1, task_id: str = "t1"):
    """Lay out a run directory the way the agent does and return its payload."""
    from vqpu.rundir import PAYLOAD_FILE, ExecutionPayload, write_atomic

    run_dir.mkdir(parents=True, exist_ok=True)
    payload = ExecutionPayload(task_id, source, DIALECT, shots, seed, snapshot, "2026-01-01T00:00:00.000000Z")
    write_atomic(run_dir / PAYLOAD_FILE, payload.canonical_json())
    return payload


# -- acceptance verdict lines ----------------------------------------------

_verdicts: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    title = marker.args[0]
    if report.failed:
        _verdicts[title] = "FAIL"
    elif report.when == "call" and report.passed:
        _verdicts.setdefault(title, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for title, verdict in _verdicts.items():
        terminalreporter.write_line(f"{verdict}  {title}")
