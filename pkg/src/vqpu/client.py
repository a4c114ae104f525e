"""HTTP client for the control plane, shared by the agent, CLI, and experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterator

import httpx

from .circuit import DIALECT
from .errors import BAD_REQUEST, ErrorEnvelope, VqpuError


class ApiError(VqpuError):
    """A non-success response carrying the server's error envelope."""

    def __init__(self, status: int, envelope: ErrorEnvelope) -> None:
        super().__init__(envelope.code, envelope.message, envelope.detail)
        self.status = status
        self.server_envelope = envelope


@dataclass(frozen=True)
class SseEvent:
    event: str
    data: Any
    id: int | None = None


def iter_sse(lines: Iterator[str]) -> Iterator[SseEvent]:
    """Minimal text/event-stream parser (comments are skipped)."""
    event, data, ev_id = "message", [], None
    for line in lines:
        if line == "":
            if data:
                raw = "\n".join(data)
                try:
                    payload = json.loads(raw)
                except ValueError:
                    payload = raw
                yield SseEvent(event, payload, ev_id)
            event, data, ev_id = "message", [], None
            continue
        if line.startswith(":"):
            continue
        name, _, value = line.partition(":")
        value = value[1:] if value.startswith(" ") else value
        if name == "event":
            event = value
        elif name == "data":
            data.append(value)
        elif name == "id":
            ev_id = int(value) if value.isdigit() else None


class Client:
    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self._http = httpx.Client(
            base_url=self.base_url,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> Client:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _call(
        self,
        method: str,
        path: str,
        *,
        json_body: Any = None,
        params: dict[str, Any] | None = None,
        timeout: float | None = None,
    ) -> Any:
        params = {k: v for k, v in (params or {}).items() if v is not None}
        resp = self._http.request(
            method, path, json=json_body, params=params, timeout=timeout if timeout is not None else self.timeout
        )
        if resp.status_code == 204:
            return None
        if resp.is_success:
            return resp.json()
        try:
            envelope = ErrorEnvelope.from_dict(resp.json())
        except (ValueError, KeyError, TypeError):
            envelope = ErrorEnvelope(BAD_REQUEST, f"HTTP {resp.status_code}: {resp.text[:500]}")
        raise ApiError(resp.status_code, envelope)

    def health(self) -> dict[str, Any]:
        return self._call("GET", "/healthz")

    # -- client verbs --------------------------------------------------

    def submit(
        self, circuit_source: str, device_id: str, shots: int, seed: int | None = None, dialect: str = DIALECT
    ) -> dict[str, Any]:
        body = {"circuit_source": circuit_source, "dialect": dialect, "shots": shots, "device_id": device_id}
        if seed is not None:
            body["seed"] = seed
        return self._call("POST", "/tasks", json_body=body)

    def check(self, circuit_source: str, device_id: str, shots: int = 1, dialect: str = DIALECT) -> dict[str, Any]:
        body = {"circuit_source": circuit_source, "dialect": dialect, "shots": shots, "device_id": device_id}
        return self._call("POST", "/tasks/check", json_body=body)

    def get_task(self, task_id: str, wait_s: float = 0.0) -> dict[str, Any]:
        return self._call(
            "GET", f"/tasks/{task_id}", params={"wait_s": wait_s or None}, timeout=self.timeout + wait_s
        )

    def list_tasks(self, state: str | None = None, device: str | None = None, owner: str | None = None) -> list[dict]:
        return self._call("GET", "/tasks", params={"state": state, "device": device, "owner": owner})["tasks"]

    def cancel(self, task_id: str) -> dict[str, Any]:
        return self._call("POST", f"/tasks/{task_id}/cancel")

    # -- admin verbs ---------------------------------------------------

    def requeue(self, task_id: str) -> dict[str, Any]:
        return self._call("POST", f"/admin/tasks/{task_id}/requeue")

    def force_fail(self, task_id: str, message: str | None = None, code: str | None = None) -> dict[str, Any]:
        body = {k: v for k, v in {"message": message, "code": code}.items() if v}
        return self._call("POST", f"/admin/tasks/{task_id}/force-fail", json_body=body)

    def stale(self) -> dict[str, Any]:
        return self._call("GET", "/admin/tasks/stale")

    def audit(self) -> list[dict]:
        return self._call("GET", "/admin/audit")["entries"]

    def cache_stats(self) -> dict[str, int]:
        return self._call("GET", "/admin/cache")

    def list_devices(self) -> list[dict]:
        return self._call("GET", "/devices")["devices"]

    def get_device(self, device_id: str, authoritative: bool = False) -> dict[str, Any]:
        return self._call("GET", f"/devices/{device_id}", params={"authoritative": authoritative or None})

    def device_history(self, device_id: str) -> list[dict]:
        return self._call("GET", f"/devices/{device_id}/history")["history"]

    def put_device(self, device_id: str, descriptor: dict[str, Any]) -> dict[str, Any]:
        return self._call("PUT", f"/admin/devices/{device_id}", json_body=descriptor)

    def delete_device(self, device_id: str) -> None:
        self._call("DELETE", f"/admin/devices/{device_id}")

    # -- agent protocol ------------------------------------------------

    def claim(self, agent_id: str, wait_s: float = 0.0) -> dict[str, Any] | None:
        return self._call(
            "POST",
            "/agent/claim",
            json_body={"agent_id": agent_id},
            params={"wait_s": wait_s or None},
            timeout=self.timeout + wait_s,
        )

    def report_running(self, task_id: str, agent_id: str, scheduler_job_id: str) -> dict[str, Any]:
        body = {"agent_id": agent_id, "scheduler_job_id": scheduler_job_id}
        return self._call("POST", f"/agent/tasks/{task_id}/running", json_body=body)

    def report_completed(self, task_id: str, agent_id: str, result: dict[str, Any]) -> dict[str, Any]:
        return self._call("POST", f"/agent/tasks/{task_id}/completed", json_body={"agent_id": agent_id, "result": result})

    def report_failed(self, task_id: str, agent_id: str, error: dict[str, Any]) -> dict[str, Any]:
        return self._call("POST", f"/agent/tasks/{task_id}/failed", json_body={"agent_id": agent_id, "error": error})

    def heartbeat(self, agent_id: str, task_ids: list[str]) -> dict[str, str]:
        return self._call("POST", "/agent/heartbeat", json_body={"agent_id": agent_id, "task_ids": task_ids})["acks"]

    # -- events --------------------------------------------------------

    def events(self, from_sequence: int | None = None, read_timeout: float | None = None) -> Iterator[SseEvent]:
        """Stream events; with ``from_sequence`` the server replays everything after it."""
        headers = {"Last-Event-ID": str(from_sequence)} if from_sequence is not None else {}
        timeout = httpx.Timeout(self.timeout, read=read_timeout)
        with self._http.stream("GET", "/events", headers=headers, timeout=timeout) as resp:
            if not resp.is_success:
                resp.read()
                raise ApiError(resp.status_code, ErrorEnvelope.from_dict(resp.json()))
            yield from iter_sse(resp.iter_lines())
