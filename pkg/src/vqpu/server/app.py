"""HTTP+JSON surface of the control plane (FastAPI)."""

from __future__ import annotations

import asyncio
import contextlib
from typing import Any

from fastapi import Body, FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from starlette.types import Receive, Scope, Send

from ..errors import (
    ADMISSIBILITY_CODES,
    AUTH_FAILED,
    BAD_REQUEST,
    DEVICE_MISMATCH,
    ILLEGAL_TRANSITION,
    NOT_OWNER,
    PARSE_ERROR,
    SNAPSHOT_INVALID,
    STORE_ERROR,
    UNKNOWN_DEVICE,
    UNKNOWN_TASK,
    UNSUPPORTED_DIALECT,
    VqpuError,
)
from .auth import ADMIN, Principal, require
from .broker import KEEPALIVE_FRAME, Broker, Subscription, format_error, format_event
from .service import ControlPlane

STATUS_BY_CODE = {
    PARSE_ERROR: 400,
    UNSUPPORTED_DIALECT: 400,
    SNAPSHOT_INVALID: 400,
    BAD_REQUEST: 400,
    DEVICE_MISMATCH: 400,
    AUTH_FAILED: 401,
    NOT_OWNER: 403,
    UNKNOWN_TASK: 404,
    UNKNOWN_DEVICE: 404,
    ILLEGAL_TRANSITION: 409,
    STORE_ERROR: 500,
    **{code: 422 for code in ADMISSIBILITY_CODES},
}


def status_for(exc: VqpuError) -> int:
    if exc.code == AUTH_FAILED and (exc.detail or {}).get("forbidden"):
        return 403
    return STATUS_BY_CODE.get(exc.code, 400)


def error_response(exc: VqpuError) -> JSONResponse:
    return JSONResponse(exc.envelope().to_dict(), status_code=status_for(exc))


class EventStreamResponse(Response):
    """Streams one subscription; returns as soon as the subscriber is evicted,
    even if a send to a stalled client is still pending."""

    media_type = "text/event-stream"

    def __init__(self, broker: Broker, subscription: Subscription, keepalive_s: float) -> None:
        super().__init__(content=None, media_type=self.media_type)
        self.broker = broker
        self.subscription = subscription
        self.keepalive_s = keepalive_s

    async def _pump(self, send: Send) -> None:
        sub = self.subscription.subscriber

        async def emit(chunk: bytes) -> None:
            await send({"type": "http.response.body", "body": chunk, "more_body": True})

        if self.subscription.window_error is not None:
            await emit(format_error(self.subscription.window_error))
        for ev in self.subscription.replay:
            if ev.sequence > sub.last_delivered_sequence:
                sub.last_delivered_sequence = ev.sequence
                await emit(format_event(ev))
        while True:
            try:
                ev = await asyncio.wait_for(sub.queue.get(), self.keepalive_s)
            except asyncio.TimeoutError:
                await emit(KEEPALIVE_FRAME)
                continue
            if ev.sequence > sub.last_delivered_sequence:
                sub.last_delivered_sequence = ev.sequence
                await emit(format_event(ev))

    async def _disconnected(self, receive: Receive) -> None:
        while True:
            message = await receive()
            if message["type"] == "http.disconnect":
                return

    async def __call__(self, scope: Scope, receive: Receive, send: Send) -> None:
        sub = self.subscription.subscriber
        await send(
            {
                "type": "http.response.start",
                "status": 200,
                "headers": [
                    (b"content-type", b"text/event-stream"),
                    (b"cache-control", b"no-cache"),
                    (b"x-accel-buffering", b"no"),
                ],
            }
        )
        tasks = [
            asyncio.ensure_future(self._pump(send)),
            asyncio.ensure_future(self._disconnected(receive)),
            asyncio.ensure_future(sub.closed.wait()),
        ]
        try:
            await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for t in tasks:
                t.cancel()
            for t in tasks:
                with contextlib.suppress(BaseException):
                    await t
            self.broker.unsubscribe(sub)
        if sub.evicted:
            # best effort; a stalled peer gets its connection dropped instead
            with contextlib.suppress(BaseException):
                await asyncio.wait_for(send({"type": "http.response.body", "body": b"", "more_body": False}), 0.5)


def _bearer(authorization: str | None) -> str | None:
    if authorization and authorization.lower().startswith("bearer "):
        return authorization[7:].strip()
    return None


def create_app(service: ControlPlane) -> FastAPI:
    broker = Broker(service.events, service.config.subscriber_capacity)

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        broker.start(asyncio.get_running_loop())
        try:
            yield
        finally:
            broker.stop()

    app = FastAPI(title="vqpu control plane", lifespan=lifespan)
    app.state.service = service
    app.state.broker = broker

    @app.exception_handler(VqpuError)
    async def _vqpu_error(request: Request, exc: VqpuError) -> JSONResponse:
        return error_response(exc)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError) -> JSONResponse:
        return error_response(VqpuError(BAD_REQUEST, "malformed request", {"errors": str(exc.errors())[:2000]}))

    def principal(authorization: str | None) -> Principal:
        return service.authenticate(_bearer(authorization))

    Auth = Header(None, alias="Authorization")

    @app.get("/healthz")
    def healthz() -> dict[str, Any]:
        return {"ok": True, "last_sequence": service.events.last_sequence}

    # -- client API ----------------------------------------------------

    @app.post("/tasks", status_code=201)
    def submit(body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        return service.submit(principal(authorization), body).to_dict()

    @app.post("/tasks/check")
    def check(body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        return service.check(principal(authorization), body).to_dict()

    @app.get("/tasks")
    def list_tasks(
        state: str | None = None,
        device: str | None = None,
        owner: str | None = None,
        authorization: str | None = Auth,
    ) -> dict[str, Any]:
        recs = service.list_tasks(principal(authorization), state, device, owner)
        return {"tasks": [r.to_dict() for r in recs]}

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str, wait_s: float = 0.0, authorization: str | None = Auth) -> dict[str, Any]:
        return service.get_task(principal(authorization), task_id, wait_s).to_dict()

    @app.post("/tasks/{task_id}/cancel")
    def cancel(task_id: str, authorization: str | None = Auth) -> dict[str, Any]:
        return service.cancel(principal(authorization), task_id).to_dict()

    @app.get("/devices")
    def list_devices(authorization: str | None = Auth) -> dict[str, Any]:
        return {"devices": [s.to_dict() for s in service.list_devices(principal(authorization))]}

    @app.get("/devices/{device_id}")
    def get_device(device_id: str, authoritative: bool = False, authorization: str | None = Auth) -> dict[str, Any]:
        return service.get_device(principal(authorization), device_id, authoritative).to_dict()

    @app.get("/devices/{device_id}/history")
    def device_history(device_id: str, authorization: str | None = Auth) -> dict[str, Any]:
        principal(authorization)
        return {"history": [s.to_dict() for s in service.devices.history(device_id)]}

    # -- admin API -----------------------------------------------------

    @app.put("/admin/devices/{device_id}")
    def put_device(device_id: str, body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        return service.put_device(principal(authorization), device_id, body).to_dict()

    @app.delete("/admin/devices/{device_id}", status_code=204)
    def delete_device(device_id: str, authorization: str | None = Auth) -> Response:
        service.delete_device(principal(authorization), device_id)
        return Response(status_code=204)

    @app.post("/admin/tasks/{task_id}/requeue")
    def requeue(task_id: str, authorization: str | None = Auth) -> dict[str, Any]:
        return service.requeue(principal(authorization), task_id).to_dict()

    @app.post("/admin/tasks/{task_id}/force-fail")
    def force_fail(task_id: str, body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        return service.force_fail(principal(authorization), task_id, body).to_dict()

    @app.get("/admin/tasks/stale")
    def stale(authorization: str | None = Auth) -> dict[str, Any]:
        recs = service.list_stale(principal(authorization))
        return {"liveness_window_s": service.config.liveness_window_s, "tasks": [r.to_dict() for r in recs]}

    @app.get("/admin/audit")
    def audit(authorization: str | None = Auth) -> dict[str, Any]:
        require(principal(authorization), ADMIN)
        return {"entries": [e.to_dict() for e in service.store.audit_log()]}

    @app.get("/admin/cache")
    def cache_stats(authorization: str | None = Auth) -> dict[str, Any]:
        require(principal(authorization), ADMIN)
        return service.devices.cache.counters.to_dict()

    # -- agent protocol ------------------------------------------------

    def _agent_body(body: Any) -> dict[str, Any]:
        if not isinstance(body, dict) or not isinstance(body.get("agent_id"), str) or not body["agent_id"]:
            raise VqpuError(BAD_REQUEST, "body must carry a non-empty agent_id")
        return body

    @app.post("/agent/claim")
    def claim(wait_s: float = 0.0, body: Any = Body(None), authorization: str | None = Auth) -> Any:
        b = _agent_body(body)
        granted = service.claim(principal(authorization), b["agent_id"], wait_s)
        if granted is None:
            return Response(status_code=204)
        return granted

    @app.post("/agent/tasks/{task_id}/running")
    def running(task_id: str, body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        b = _agent_body(body)
        rec = service.report_running(principal(authorization), task_id, b["agent_id"], b.get("scheduler_job_id"))
        return rec.to_dict()

    @app.post("/agent/tasks/{task_id}/completed")
    def completed(task_id: str, body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        b = _agent_body(body)
        return service.report_completed(principal(authorization), task_id, b["agent_id"], b.get("result")).to_dict()

    @app.post("/agent/tasks/{task_id}/failed")
    def failed(task_id: str, body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        b = _agent_body(body)
        return service.report_failed(principal(authorization), task_id, b["agent_id"], b.get("error")).to_dict()

    @app.post("/agent/heartbeat")
    def heartbeat(body: Any = Body(None), authorization: str | None = Auth) -> dict[str, Any]:
        b = _agent_body(body)
        acks = service.heartbeat(principal(authorization), b["agent_id"], b.get("task_ids", []))
        return {"acks": acks}

    # -- events --------------------------------------------------------

    @app.get("/events")
    async def events(
        request: Request,
        authorization: str | None = Auth,
        last_event_id: str | None = Header(None, alias="Last-Event-ID"),
        from_sequence: int | None = Query(None),
        api_key: str | None = Query(None),
    ) -> Response:
        service.authenticate(_bearer(authorization) or api_key)
        after = from_sequence
        if after is None and last_event_id is None:
            after = request.query_params.get("last_event_id")
        if after is None and last_event_id is not None:
            after = last_event_id
        try:
            after = int(after) if after is not None else None
        except ValueError:
            raise VqpuError(BAD_REQUEST, "replay position must be an integer") from None
        subscription = broker.subscribe(after)
        return EventStreamResponse(broker, subscription, service.config.keepalive_s)

    return app
