"""UI-facing backend: event-sourced row store, operator edits,
recalibration commands, Non-OK export, latency metrics, and the HTTP/SSE
API the browser console consumes.

The store is an append-only event log plus a materialized view that is
exactly the fold of that log; edits never mutate history. A single
writer serializes all mutations; readers get immutable snapshots.
"""
from __future__ import annotations

import asyncio
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from typing import Iterable

# module level so FastAPI can resolve the (stringified) endpoint annotations
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .bus import BusSession, Envelope, TopicSet
from .config import DeviationPolicy, FeatureSchema
from .errors import (
    CommandTimeout,
    NoCorrections,
    NonFiniteTarget,
    NoSamples,
    RowNotFound,
    SchemaError,
)
from .inference import Status, classify

log = logging.getLogger(__name__)

ROW_CAPACITY = 100_000
SNAPSHOT_ROWS = 500
AUTO_WINDOW = 50
AUTO_NONOK_FRACTION = 0.2
COMMAND_TIMEOUT_S = 5.0
CLIENT_QUEUE_CAPACITY = 1000


# --------------------------------------------------------------------------
# Events and the materialized view
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RowEvent:
    kind: str  # created | target_edited | explanation_attached | status_recomputed
    row_id: int
    data: dict


@dataclass
class RecordRow:
    row_id: int
    observation: dict
    prediction: dict
    status: str
    target_provenance: str = "sensor"
    explanation: dict | None = None
    ingest_time: float = 0.0
    publish_time: float = 0.0
    display_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "row_id": self.row_id,
            "observation": self.observation,
            "prediction": self.prediction,
            "status": self.status,
            "target_provenance": self.target_provenance,
            "explanation": self.explanation,
            "ingest_time": self.ingest_time,
            "publish_time": self.publish_time,
            "display_time": self.display_time,
        }


def apply_event(view: dict[int, RecordRow], order: list[int], event: RowEvent) -> None:
    """Pure fold step; both the live store and the consistency check use it."""
    if event.kind == "created":
        if event.row_id in view:
            return  # idempotent upsert: QoS-1 duplicate delivery
        d = event.data
        view[event.row_id] = RecordRow(
            row_id=event.row_id,
            observation=d["observation"],
            prediction=d["prediction"],
            status=d["status"],
            target_provenance=d.get("target_provenance", "sensor"),
            ingest_time=d.get("ingest_time", 0.0),
            publish_time=d.get("publish_time", 0.0),
            display_time=d.get("display_time", 0.0),
        )
        order.append(event.row_id)
        if len(order) > ROW_CAPACITY:
            evicted = order.pop(0)
            view.pop(evicted, None)
    elif event.kind == "target_edited":
        row = view.get(event.row_id)
        if row is None:
            return
        row.observation = {**row.observation, "target": event.data["target"]}
        row.status = event.data["status"]
        row.target_provenance = event.data.get("provenance", "human_edited")
    elif event.kind == "explanation_attached":
        row = view.get(event.row_id)
        if row is None:
            return
        row.explanation = event.data["explanation"]
    elif event.kind == "status_recomputed":
        row = view.get(event.row_id)
        if row is None:
            return
        row.status = event.data["status"]
    else:
        raise ValueError(f"unknown event kind {event.kind!r}")


def fold_events(events: Iterable[RowEvent]) -> tuple[dict[int, RecordRow], list[int]]:
    view: dict[int, RecordRow] = {}
    order: list[int] = []
    for event in events:
        apply_event(view, order, event)
    return view, order


@dataclass(frozen=True)
class LatencyStats:
    count: int
    p50_ms: float
    p95_ms: float
    p99_ms: float
    mean_ms: float

    def to_dict(self) -> dict:
        return {
            "count": self.count, "p50_ms": self.p50_ms, "p95_ms": self.p95_ms,
            "p99_ms": self.p99_ms, "mean_ms": self.mean_ms,
        }


def nearest_rank(sorted_samples: list[float], percentile: float) -> float:
    """Nearest-rank percentile; samples must be sorted ascending."""
    if not sorted_samples:
        raise NoSamples("no latency samples")
    rank = math.ceil(percentile / 100.0 * len(sorted_samples))
    return sorted_samples[max(rank, 1) - 1]


# --------------------------------------------------------------------------
# The row store
# --------------------------------------------------------------------------

class RowStore:
    """Single-writer event log + materialized view + SSE fan-out."""

    def __init__(self, policy: DeviationPolicy, log_path: str | None = None) -> None:
        self._policy = policy
        self._lock = threading.Lock()
        self.events: list[RowEvent] = []
        self._view: dict[int, RecordRow] = {}
        self._order: list[int] = []
        self._clients: list[queue.Queue] = []
        self._log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    @property
    def policy(self) -> DeviationPolicy:
        return self._policy

    def close(self) -> None:
        if self._log_file:
            self._log_file.close()

    # -- mutations (all serialized through _append) --------------------

    def _append(self, event: RowEvent) -> RecordRow | None:
        with self._lock:
            self.events.append(event)
            apply_event(self._view, self._order, event)
            row = self._view.get(event.row_id)
            snapshot = row.to_dict() if row else None
            if self._log_file:
                self._log_file.write(json.dumps(
                    {"kind": event.kind, "row_id": event.row_id, "data": event.data}
                ) + "\n")
                self._log_file.flush()
            clients = list(self._clients)
        if snapshot is not None:
            doc = {"event": event.kind, "row": snapshot}
            for q in clients:
                try:
                    q.put_nowait(doc)
                except queue.Full:
                    self._drop_client(q)  # slow clients dropped, not backpressured
        return row

    def _drop_client(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._clients:
                self._clients.remove(q)

    def record_result(self, message: dict) -> RecordRow:
        """Idempotent append of one result message (dedupe by row_id)."""
        _validate_result(message)
        row_id = int(message["row_id"])
        with self._lock:
            existing = self._view.get(row_id)
        if existing is not None:
            return existing
        timing = message.get("timing", {})
        now = time.time()
        event = RowEvent("created", row_id, {
            "observation": message["observation"],
            "prediction": message["prediction"],
            "status": message["status"],
            "target_provenance": "sensor",
            "ingest_time": float(timing.get("ingest_ts",
                                            message["observation"].get("ts", now))),
            "publish_time": float(timing.get("published_ts", now)),
            "display_time": now,
        })
        return self._append(event)

    def edit_target(self, row_id: int, new_target: float) -> RecordRow:
        if not isinstance(new_target, (int, float)) or isinstance(new_target, bool) \
                or not math.isfinite(float(new_target)):
            raise NonFiniteTarget(f"target {new_target!r} is not a finite number")
        with self._lock:
            row = self._view.get(row_id)
            if row is None:
                raise RowNotFound(row_id)
            predicted = float(row.prediction["predicted"])
        status = classify(predicted, float(new_target), self._policy)
        event = RowEvent("target_edited", row_id, {
            "target": float(new_target),
            "status": status.value,
            "provenance": "human_edited",
        })
        return self._append(event)

    def attach_explanation(self, message: dict) -> RecordRow | None:
        row_id = int(message["row_id"])
        with self._lock:
            if row_id not in self._view:
                log.warning("explanation for unknown row %d dropped", row_id)
                return None
        return self._append(RowEvent("explanation_attached", row_id, {
            "explanation": {
                "text": message.get("text", ""),
                "model_name": message.get("model_name", ""),
                "flags_recalibration": bool(message.get("flags_recalibration", False)),
            },
        }))

    # -- reads ---------------------------------------------------------

    def rows(self, limit: int | None = None) -> list[RecordRow]:
        with self._lock:
            ids = self._order[-limit:] if limit else list(self._order)
            return [self._view[i] for i in ids]

    def get(self, row_id: int) -> RecordRow:
        with self._lock:
            row = self._view.get(row_id)
        if row is None:
            raise RowNotFound(row_id)
        return row

    def view_snapshot(self) -> tuple[dict[int, RecordRow], list[int]]:
        with self._lock:
            return dict(self._view), list(self._order)

    def corrections(self) -> list[dict]:
        """Human-edited rows as (features, target) pairs, ordered by row_id."""
        with self._lock:
            rows = [self._view[i] for i in self._order
                    if self._view[i].target_provenance == "human_edited"]
        return [
            {"features": dict(r.observation["features"]),
             "target": r.observation["target"]}
            for r in rows
        ]

    def nonok_fraction(self, window: int = AUTO_WINDOW) -> float:
        with self._lock:
            ids = self._order[-window:]
            if not ids:
                return 0.0
            nonok = sum(1 for i in ids if self._view[i].status == Status.NON_OK.value)
            return nonok / len(ids)

    def export_nonok(self) -> list[dict]:
        with self._lock:
            rows = [self._view[i] for i in sorted(self._order)
                    if self._view[i].status == Status.NON_OK.value]
        return [r.to_dict() for r in rows]

    def latency_report(self) -> LatencyStats:
        with self._lock:
            samples = sorted(
                (self._view[i].publish_time - self._view[i].ingest_time) * 1000.0
                for i in self._order
            )
        if not samples:
            raise NoSamples("no completed rows")
        return LatencyStats(
            count=len(samples),
            p50_ms=nearest_rank(samples, 50),
            p95_ms=nearest_rank(samples, 95),
            p99_ms=nearest_rank(samples, 99),
            mean_ms=sum(samples) / len(samples),
        )

    # -- SSE fan-out ---------------------------------------------------

    def subscribe_updates(self) -> tuple[list[dict], queue.Queue]:
        """Snapshot of the last 500 rows plus a live-tail queue."""
        q: queue.Queue = queue.Queue(maxsize=CLIENT_QUEUE_CAPACITY)
        with self._lock:
            snapshot = [self._view[i].to_dict() for i in self._order[-SNAPSHOT_ROWS:]]
            self._clients.append(q)
        return snapshot, q

    def unsubscribe_updates(self, q: queue.Queue) -> None:
        self._drop_client(q)


def _validate_result(message: dict) -> None:
    if not isinstance(message, dict):
        raise SchemaError("result message must be an object")
    for key in ("row_id", "observation", "prediction", "status"):
        if key not in message:
            raise SchemaError(f"result message missing '{key}'")
    if not isinstance(message["row_id"], int) or isinstance(message["row_id"], bool):
        raise SchemaError("row_id must be an integer")
    obs = message["observation"]
    if not isinstance(obs, dict) or not isinstance(obs.get("features"), dict):
        raise SchemaError("observation must carry a features object")
    pred = message["prediction"]
    if not isinstance(pred, dict) or "predicted" not in pred \
            or "model_version" not in pred:
        raise SchemaError("prediction must carry predicted and model_version")
    if message["status"] not in (Status.OK.value, Status.NON_OK.value):
        raise SchemaError(f"unknown status {message['status']!r}")


# --------------------------------------------------------------------------
# Bus-facing gateway agent
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CommandReceipt:
    mode: str
    model_version: int
    at: float

    def to_dict(self) -> dict:
        return {"mode": self.mode, "model_version": self.model_version, "at": self.at}


class GatewayAgent:
    """Consumes results and explanations off the output topic, maintains
    the store, and fires auto-recalibration when the Non-OK fraction over
    the last 50 rows exceeds 0.2 (window resets after each firing)."""

    def __init__(self, session: BusSession, topics: TopicSet, store: RowStore,
                 auto_recalibrate: bool = True,
                 auto_window: int = AUTO_WINDOW,
                 auto_fraction: float = AUTO_NONOK_FRACTION) -> None:
        self._session = session
        self._topics = topics
        self.store = store
        self._auto = auto_recalibrate
        self._auto_window = auto_window
        self._auto_fraction = auto_fraction
        self._rows_since_fire = 0
        self._ack_lock = threading.Lock()
        self._ack_event = threading.Event()
        self._last_ack: dict | None = None
        self.auto_fires = 0
        self._output_sub = session.subscribe(topics.output, self._on_output)
        self._command_sub = session.subscribe(topics.command, self._on_command)

    def stop(self) -> None:
        self._session.unsubscribe(self._output_sub)
        self._session.unsubscribe(self._command_sub)

    def _on_output(self, envelope: Envelope) -> None:
        try:
            doc = json.loads(envelope.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            log.warning("dropped malformed output message: %s", exc)
            return
        if not isinstance(doc, dict):
            return
        if "prediction" in doc:
            try:
                self.store.record_result(doc)
            except SchemaError as exc:
                log.warning("dropped result: %s", exc)
                return
            self._rows_since_fire += 1
            self._maybe_auto_recalibrate()
        elif "text" in doc and "row_id" in doc:
            self.store.attach_explanation(doc)

    def _on_command(self, envelope: Envelope) -> None:
        try:
            doc = json.loads(envelope.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        if isinstance(doc, dict) and "ack" in doc:
            self._last_ack = doc
            self._ack_event.set()

    def _maybe_auto_recalibrate(self) -> None:
        if not self._auto or self._rows_since_fire < self._auto_window:
            return
        if self.store.nonok_fraction(self._auto_window) <= self._auto_fraction:
            return
        try:
            receipt = self.trigger_recalibration("auto")
            self.auto_fires += 1
            log.info("auto recalibration fired: new version %d", receipt.model_version)
        except (NoCorrections, CommandTimeout) as exc:
            log.warning("auto recalibration not applied: %s", exc)
        finally:
            self._rows_since_fire = 0

    def trigger_recalibration(self, mode: str = "manual") -> CommandReceipt:
        corrections = self.store.corrections()
        if not corrections:
            raise NoCorrections("no human-edited rows to learn from")
        with self._ack_lock:
            self._ack_event.clear()
            self._last_ack = None
            command = {"cmd": "recalibrate", "corrections": corrections}
            self._session.publish(self._topics.command,
                                  json.dumps(command, sort_keys=True).encode())
            if not self._ack_event.wait(timeout=COMMAND_TIMEOUT_S):
                raise CommandTimeout("no acknowledgment from inference agent")
            ack = self._last_ack or {}
        if not ack.get("ok"):
            raise NoCorrections(f"agent rejected recalibration: {ack.get('error')}")
        return CommandReceipt(mode, int(ack.get("model_version", -1)), time.time())


def record_result(store: RowStore, message: dict) -> RecordRow:
    return store.record_result(message)


def edit_target(store: RowStore, row_id: int, new_target: float,
                policy: DeviationPolicy | None = None) -> RecordRow:
    return store.edit_target(row_id, new_target)


def export_nonok(store: RowStore) -> list[dict]:
    return store.export_nonok()


def latency_report(store: RowStore) -> LatencyStats:
    return store.latency_report()


# --------------------------------------------------------------------------
# HTTP API
# --------------------------------------------------------------------------

def create_app(store: RowStore, schema: FeatureSchema,
               agent: GatewayAgent | None = None,
               static_dir: str | None = None):
    """FastAPI app over the store; `agent` enables /api/recalibrate and
    the pipeline endpoints reach the designer headlessly."""
    from . import designer
    from .inference import artifact_to_dict

    app = FastAPI(title="edgeci gateway", docs_url=None, redoc_url=None)

    @app.get("/api/rows")
    def get_rows(limit: int | None = None):
        return {"rows": [r.to_dict() for r in store.rows(limit)]}

    @app.get("/api/stream")
    async def stream(request: Request):
        snapshot, q = store.subscribe_updates()

        async def gen():
            try:
                for row in snapshot:
                    yield _sse("snapshot", {"row": row})
                yield _sse("snapshot_end", {})
                idle = 0
                while not await request.is_disconnected():
                    try:
                        doc = q.get_nowait()
                    except queue.Empty:
                        idle += 1
                        if idle >= 300:  # ~15 s of silence
                            idle = 0
                            yield ": keepalive\n\n"
                        await asyncio.sleep(0.05)
                        continue
                    idle = 0
                    yield _sse(doc["event"], doc)
            finally:
                store.unsubscribe_updates(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.patch("/api/rows/{row_id}/target")
    async def patch_target(row_id: int, request: Request):
        body = await request.json()
        try:
            row = store.edit_target(row_id, body.get("target"))
        except RowNotFound as exc:
            raise HTTPException(404, str(exc)) from exc
        except NonFiniteTarget as exc:
            raise HTTPException(400, str(exc)) from exc
        return row.to_dict()

    @app.post("/api/recalibrate")
    async def recalibrate(request: Request):
        if agent is None:
            raise HTTPException(503, "no bus-connected gateway agent")
        body = await request.json() if int(request.headers.get("content-length", 0)) else {}
        mode = (body or {}).get("mode", "manual")
        try:
            receipt = agent.trigger_recalibration(mode)
        except NoCorrections as exc:
            raise HTTPException(409, f"NoCorrections: {exc}") from exc
        except CommandTimeout as exc:
            raise HTTPException(504, f"CommandTimeout: {exc}") from exc
        return receipt.to_dict()

    @app.get("/api/export/nonok")
    def export():
        return JSONResponse(
            store.export_nonok(),
            headers={"Content-Disposition": 'attachment; filename="nonok.json"'},
        )

    @app.get("/api/metrics/latency")
    def latency():
        try:
            return store.latency_report().to_dict()
        except NoSamples as exc:
            raise HTTPException(404, str(exc)) from exc

    @app.get("/api/metrics/recalibration")
    def recal_metrics():
        return {
            "nonok_window_fraction": store.nonok_fraction(),
            "auto_fires": agent.auto_fires if agent else 0,
            "corrections_pending": len(store.corrections()),
        }

    @app.get("/api/config")
    def get_config():
        return {
            "features": [
                {"name": f.name, "unit": f.unit, "required": f.required,
                 "min": f.min, "max": f.max}
                for f in schema.features
            ],
            "target_name": schema.target_name,
            "deviation_policy": {
                "mode": store.policy.mode.value,
                "threshold": store.policy.threshold,
            },
        }

    @app.post("/api/pipelines/validate")
    async def validate_pipeline(request: Request):
        body = await request.json()
        try:
            spec = designer.pipeline_from_dict(body)
        except (KeyError, TypeError, ValueError) as exc:
            return {"valid": False, "errors": [f"ParseError: {exc}"]}
        report = designer.validate_pipeline(spec)
        return {"valid": report.valid, "errors": report.errors}

    @app.post("/api/pipelines/run")
    async def run_pipeline(request: Request):
        body = await request.json()
        try:
            spec = designer.pipeline_from_dict(body.get("spec", body))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(400, f"bad pipeline spec: {exc}") from exc
        dataset = body.get("dataset")
        if dataset is None:
            dataset = [
                ([r.observation["features"][n] for n in schema.feature_names],
                 r.observation.get("target"))
                for r in store.rows()
                if r.observation.get("target") is not None
            ]
        else:
            dataset = [(list(x), t) for x, t in dataset]
        try:
            result = designer.run_pipeline(spec, dataset, schema=schema)
        except Exception as exc:
            raise HTTPException(422, f"{type(exc).__name__}: {exc}") from exc
        return {
            "metrics": result.metrics,
            "exports": result.exports,
            "artifact": (None if result.artifact is None
                         else artifact_to_dict(result.artifact)),
        }

    if static_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def _sse(event: str, data: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(data, sort_keys=True)}\n\n"


def serve_gateway(app, bind: str):
    """Run uvicorn in a daemon thread; returns (server, thread)."""
    import uvicorn

    host, _, port_s = bind.rpartition(":")
    config = uvicorn.Config(app, host=host or "127.0.0.1", port=int(port_s),
                            log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, name="gateway-http", daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.02)
    return server, thread
