from __future__ import annotations

import json
import subprocess
import sys

import pytest
from conftest import BELL, write_payload

from vqpu.harness import replay_offline
from vqpu.rundir import ERROR_FILE, RESULT_FILE, TIMINGS_FILE
from vqpu.runner import EXIT_FAILED, EXIT_OK, execute, main


def test_ideal_device_gives_a_single_outcome(tmp_path, ideal):
    write_payload(tmp_path, ideal, source="qubits 3\nx 1\nmeasure 0\nmeasure 1\nmeasure 2", shots=200)
    assert execute(tmp_path) == EXIT_OK
    result = json.loads((tmp_path / RESULT_FILE).read_text())
    assert result["counts"] == {"010": 200}
    assert result["snapshot_version"] == ideal.snapshot_version
    assert result["claimed_at"] == "2026-01-01T00:00:00.000000Z"
    timings = json.loads((tmp_path / TIMINGS_FILE).read_text())
    assert all(v >= 0 for v in timings.values())
    assert "timings" not in result  # kept out so result.json stays reproducible


def test_offline_qubit_in_bound_snapshot_writes_error(tmp_path, noisy):
    d = noisy.to_dict()
    d["qubits"][2]["state"] = "OFFLINE"
    from vqpu.device import DeviceSnapshot

    write_payload(tmp_path, DeviceSnapshot.from_dict(d), source="qubits 3\nsx 2")
    assert execute(tmp_path) == EXIT_FAILED
    err = json.loads((tmp_path / ERROR_FILE).read_text())
    assert err["code"] == "QUBIT_OFFLINE"
    assert not (tmp_path / RESULT_FILE).exists()


def test_qubit_limit_and_missing_payload(tmp_path, ideal):
    write_payload(tmp_path / "big", ideal, source="qubits 4\nsx 3")
    assert execute(tmp_path / "big", max_qubits=3) == EXIT_FAILED
    assert json.loads((tmp_path / "big" / ERROR_FILE).read_text())["code"] == "QUBIT_LIMIT_EXCEEDED"
    (tmp_path / "empty").mkdir()
    assert main([str(tmp_path / "empty")]) == EXIT_FAILED
    assert json.loads((tmp_path / "empty" / ERROR_FILE).read_text())["code"] == "PAYLOAD_MALFORMED"


def test_result_is_a_pure_function_of_the_payload(tmp_path, noisy):
    write_payload(tmp_path / "a", noisy, source=BELL, shots=500, seed=11)
    write_payload(tmp_path / "b", noisy, source=BELL, shots=500, seed=11)
    execute(tmp_path / "a")
    execute(tmp_path / "b")
    assert (tmp_path / "a" / RESULT_FILE).read_bytes() == (tmp_path / "b" / RESULT_FILE).read_bytes()


def test_offline_replay_is_byte_identical(tmp_path, noisy):
    write_payload(tmp_path / "orig", noisy, source=BELL, shots=300, seed=5)
    assert execute(tmp_path / "orig") == EXIT_OK
    replayed = replay_offline(tmp_path / "orig", tmp_path / "replay")
    assert replayed == (tmp_path / "orig" / RESULT_FILE).read_bytes()


def test_offline_harness_really_blocks_sockets(tmp_path):
    from vqpu import harness

    probe = harness._OFFLINE_BOOT.replace(
        "from vqpu.runner import main\nsys.exit(main(sys.argv[1:]))",
        "import urllib.request\nurllib.request.urlopen('http://127.0.0.1:9', timeout=1)",
    )
    proc = subprocess.run([sys.executable, "-c", probe], capture_output=True, text=True)
    assert proc.returncode != 0 and "network disabled" in proc.stderr


# -- import closure ------------------------------------------------------


def imported_modules(module: str) -> set[str]:
    code = f"import sys, {module}; print('\\n'.join(sorted(sys.modules)))"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    return set(out.split())


def test_runner_import_closure_excludes_network_and_control_code():
    mods = imported_modules("vqpu.runner")
    forbidden = ("vqpu.server", "vqpu.agent", "vqpu.client", "vqpu.scheduler", "httpx", "fastapi", "uvicorn", "sqlite3")
    assert not [m for m in mods if m.startswith(forbidden)]
    assert "socket" not in mods


@pytest.mark.parametrize("module", ["vqpu.server.app", "vqpu.server.main"])
def test_server_never_imports_execution_code(module):
    mods = imported_modules(module)
    assert not [m for m in mods if m.startswith(("vqpu.agent", "vqpu.scheduler", "vqpu.runner", "vqpu.client"))]


def test_agent_never_imports_the_simulator_or_server():
    mods = imported_modules("vqpu.agent.main")
    assert not [m for m in mods if m.startswith(("vqpu.server", "vqpu.sim", "vqpu.runner", "fastapi", "uvicorn"))]


def test_server_only_accepts_connections(server):
    import psutil
    from vqpu.fixtures import NOISY_DEVICE

    user, agent = server.client("user"), server.client("agent")
    user.submit(BELL, NOISY_DEVICE, shots=10)
    agent.claim("probe")
    conns = psutil.Process(server.proc.pid).net_connections(kind="inet")
    assert any(c.status == psutil.CONN_LISTEN and c.laddr.port == server.port for c in conns)
    # every established socket is the accepting side of a client connection
    assert all(c.laddr.port == server.port for c in conns if c.raddr)
