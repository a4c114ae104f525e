"""Launch a control plane and agents as real processes on this host.

Used by the experiments, the CLI ``exp`` verbs, and the integration tests.
Every process gets its own log file next to its configuration.
"""

from __future__ import annotations

import os
import secrets
import signal
import socket
import subprocess
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import httpx
import yaml

from .client import Client
from .rundir import PAYLOAD_FILE, RESULT_FILE

# Replaces the socket constructors before the runner is imported, so any
# attempt to open a connection fails loudly instead of succeeding quietly.
_OFFLINE_BOOT = """
import socket, sys
def _blocked(*a, **k):
    raise OSError("network disabled by replay harness")
class _NoSocket(socket.socket):
    def __init__(self, *a, **k):
        _blocked()
socket.socket = _NoSocket
socket.create_connection = _blocked
socket.getaddrinfo = _blocked
from vqpu.runner import main
sys.exit(main(sys.argv[1:]))
"""


def replay_offline(run_dir: str | os.PathLike, scratch: str | os.PathLike) -> bytes:
    """Re-run ``run_dir``'s payload in ``scratch`` with networking disabled.

    Only payload.json is copied, so the replay cannot see earlier outputs.
    Returns the bytes of the regenerated result.json.
    """
    scratch = Path(scratch)
    scratch.mkdir(parents=True, exist_ok=False)
    (scratch / PAYLOAD_FILE).write_bytes(Path(run_dir, PAYLOAD_FILE).read_bytes())
    env = {k: v for k, v in os.environ.items() if not k.lower().endswith("_proxy")}
    proc = subprocess.run(
        [sys.executable, "-c", _OFFLINE_BOOT, str(scratch)], env=env, capture_output=True, text=True, timeout=120
    )
    if proc.returncode != 0:
        raise RuntimeError(f"offline replay of {run_dir} failed: {proc.stderr.strip()[-500:]}")
    return (scratch / RESULT_FILE).read_bytes()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@dataclass
class Keys:
    user: str = field(default_factory=lambda: "u-" + secrets.token_hex(8))
    agent: str = field(default_factory=lambda: "a-" + secrets.token_hex(8))
    admin: str = field(default_factory=lambda: "x-" + secrets.token_hex(8))

    def table(self) -> dict[str, Any]:
        return {
            self.user: {"name": "alice", "role": "user"},
            self.agent: {"name": "agent", "role": "agent"},
            self.admin: {"name": "operator", "role": "admin"},
        }


@dataclass
class Endpoint:
    """An already-running control plane and the keys to drive it."""

    url: str
    keys: Keys

    def client(self, role: str = "user", timeout: float = 30.0) -> Client:
        return Client(self.url, getattr(self.keys, role), timeout=timeout)


class ServerProcess:
    """``vqpu-server --seed-fixtures`` on a free loopback port."""

    def __init__(
        self,
        root: Path,
        *,
        keys: Keys | None = None,
        liveness_window_s: float = 90.0,
        cache_ttl_s: float = 5.0,
        env: dict[str, str] | None = None,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.keys = keys or Keys()
        self.port = free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        keys_file = self.root / "api-keys.yaml"
        keys_file.write_text(yaml.safe_dump(self.keys.table()))
        self.env = {
            **os.environ,
            "VQPU_BIND_ADDR": f"127.0.0.1:{self.port}",
            "VQPU_STORE_PATH": str(self.root / "store.sqlite"),
            "VQPU_EVENT_LOG_PATH": str(self.root / "events.jsonl"),
            "VQPU_API_KEYS_FILE": str(keys_file),
            "VQPU_LIVENESS_WINDOW_S": str(liveness_window_s),
            "VQPU_CACHE_TTL_S": str(cache_ttl_s),
            **(env or {}),
        }
        self.proc: subprocess.Popen | None = None

    def start(self, timeout: float = 20.0) -> ServerProcess:
        log = open(self.root / "server.log", "ab")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "vqpu.server.main", "--seed-fixtures"],
            env=self.env,
            stdout=log,
            stderr=subprocess.STDOUT,
        )
        log.close()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise RuntimeError(f"server exited with {self.proc.returncode}; see {self.root / 'server.log'}")
            try:
                if httpx.get(self.url + "/healthz", timeout=1.0).status_code == 200:
                    return self
            except httpx.HTTPError:
                pass
            time.sleep(0.1)
        self.stop()
        raise RuntimeError("server did not become healthy in time")

    def client(self, role: str = "user", timeout: float = 30.0) -> Client:
        return Client(self.url, getattr(self.keys, role), timeout=timeout)

    def stop(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class AgentProcess:
    """``vqpu-agent run`` with a generated configuration file."""

    def __init__(self, root: Path, server_url: str, api_key: str, agent_id: str, **settings: Any) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.agent_id = agent_id
        self.config = {
            "server_url": server_url,
            "api_key": api_key,
            "agent_id": agent_id,
            "work_dir": str(self.root / "runs"),
            "poll_interval_s": 1.0,
            "heartbeat_interval_s": 1.0,
            "claim_wait_s": 2.0,
            "finalise_interval_s": 0.1,
            **settings,
        }
        self.config_path = self.root / f"{agent_id}.yaml"
        self.proc: subprocess.Popen | None = None

    @property
    def work_dir(self) -> Path:
        return Path(self.config["work_dir"])

    def start(self) -> AgentProcess:
        self.config_path.write_text(yaml.safe_dump(self.config))
        log = open(self.root / f"{self.agent_id}.log", "ab")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "vqpu.agent.main", "--config", str(self.config_path), "run"],
            stdout=log,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        log.close()
        return self

    def crash(self) -> None:
        """SIGKILL the agent alone; runner processes it spawned are left running."""
        if self.proc is not None and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGKILL)
            self.proc.wait()

    def stop(self, timeout: float = 30.0) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


@contextmanager
def local_cluster(root: str | os.PathLike | None = None, **server_settings: Any) -> Iterator[ServerProcess]:
    """A running server in ``root`` (a fresh temporary directory by default)."""
    with tempfile.TemporaryDirectory(prefix="vqpu-") as tmp:
        server = ServerProcess(Path(root) if root else Path(tmp), **server_settings).start()
        try:
            yield server
        finally:
            server.stop()
