"""Edge-side inference: model families, OK/Non-OK classification,
recalibration, artifact serialization, the bus-driven agent, and a small
HTTP prediction endpoint.

Model families are deliberately tiny (linear, one-hidden-layer tanh MLP)
so they run on constrained hardware and every accuracy claim has an
analytic oracle.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .bus import BusSession, Envelope, TopicSet
from .config import (
    DeviationPolicy,
    FeatureSchema,
    validate_observation_against_schema,
)
from .errors import (
    BindError,
    CorruptArtifact,
    DimensionMismatch,
    FormatVersionUnsupported,
    InsufficientData,
    NonFiniteInput,
    SchemaError,
    SingularSystem,
)

log = logging.getLogger(__name__)

ARTIFACT_FORMAT_VERSION = 1
RIDGE_LAMBDA = 1e-6
MLP_EPOCHS = 200
MLP_LEARNING_RATE = 1e-2
ROLLBACK_DEPTH = 5
CONFIDENCE_WINDOW = 100


class ModelKind(str, Enum):
    LINEAR = "linear"
    MLP1H = "mlp1h"


class Status(str, Enum):
    OK = "OK"
    NON_OK = "NonOK"


@dataclass(frozen=True)
class Model:
    kind: ModelKind
    d: int
    version: int
    trained_at: float
    feature_schema_hash: str
    # linear: w (d,), b scalar
    w: tuple[float, ...] = ()
    b: float = 0.0
    # mlp1h: w1 (d*h row-major), b1 (h,), w2 (h,), b2 scalar
    h: int = 0
    w1: tuple[float, ...] = ()
    b1: tuple[float, ...] = ()
    w2: tuple[float, ...] = ()
    b2: float = 0.0


@dataclass(frozen=True)
class Prediction:
    row_id: int
    predicted: float
    confidence: float
    model_version: int
    inference_latency_us: int


@dataclass(frozen=True)
class ModelArtifact:
    model: Model
    metrics: dict
    schema: FeatureSchema
    format_version: int = ARTIFACT_FORMAT_VERSION


def make_linear_model(w, b: float, schema: FeatureSchema, version: int = 1) -> Model:
    w = tuple(float(v) for v in w)
    return Model(
        kind=ModelKind.LINEAR, d=len(w), version=version, trained_at=time.time(),
        feature_schema_hash=schema.hash(), w=w, b=float(b),
    )


def make_mlp_model(w1, b1, w2, b2: float, d: int, h: int,
                   schema: FeatureSchema, version: int = 1) -> Model:
    return Model(
        kind=ModelKind.MLP1H, d=d, version=version, trained_at=time.time(),
        feature_schema_hash=schema.hash(), h=h,
        w1=tuple(float(v) for v in np.asarray(w1).reshape(-1)),
        b1=tuple(float(v) for v in np.asarray(b1).reshape(-1)),
        w2=tuple(float(v) for v in np.asarray(w2).reshape(-1)),
        b2=float(b2),
    )


# --------------------------------------------------------------------------
# Prediction and classification
# --------------------------------------------------------------------------

def _forward(model: Model, x: np.ndarray) -> float:
    if model.kind is ModelKind.LINEAR:
        return float(np.dot(model.w, x) + model.b)
    w1 = np.asarray(model.w1).reshape(model.d, model.h)
    hidden = np.tanh(x @ w1 + np.asarray(model.b1))
    return float(hidden @ np.asarray(model.w2) + model.b2)


def predict(model: Model, features, row_id: int = 0,
            confidence: float = 1.0) -> Prediction:
    """Deterministic forward pass; latency measured per call."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.d:
        raise DimensionMismatch(f"expected {model.d} features, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("features contain non-finite values")
    t0 = time.perf_counter()
    value = _forward(model, x)
    latency_us = int((time.perf_counter() - t0) * 1e6)
    return Prediction(row_id, value, confidence, model.version, latency_us)


def classify(predicted: float | Prediction, target: float | None,
             policy: DeviationPolicy) -> Status:
    """OK/Non-OK from deviation policy; rows without targets are OK."""
    if isinstance(predicted, Prediction):
        predicted = predicted.predicted
    if target is None:
        return Status.OK
    return Status.NON_OK if policy.exceeded(predicted, target) else Status.OK


class ConfidenceTracker:
    """Heuristic confidence: exp(-|residual|/s), with s the running
    standard deviation of recent absolute errors (window 100, start 1.0).
    Monotone in recent agreement and bounded in (0, 1]."""

    def __init__(self, window: int = CONFIDENCE_WINDOW) -> None:
        self._errors: deque[float] = deque(maxlen=window)

    def scale(self) -> float:
        if len(self._errors) < 2:
            return 1.0
        return max(float(np.std(self._errors)), 1e-9)

    def confidence(self, residual_estimate: float | None) -> float:
        if residual_estimate is None:
            residual_estimate = (
                float(np.mean(self._errors)) if self._errors else 0.0
            )
        return math.exp(-abs(residual_estimate) / self.scale())

    def observe(self, abs_error: float) -> None:
        self._errors.append(abs(abs_error))


# --------------------------------------------------------------------------
# Recalibration
# --------------------------------------------------------------------------

def _as_xy(corrections) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray([list(f) for f, _ in corrections], dtype=float)
    y = np.asarray([t for _, t in corrections], dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("corrections contain non-finite values")
    return X, y


def fit_linear_ridge(X: np.ndarray, y: np.ndarray,
                     lam: float = RIDGE_LAMBDA) -> tuple[np.ndarray, float]:
    """Ridge fit (intercept unpenalized) via the augmented least-squares
    system; the normal-equations path lives only in the tests as oracle."""
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    # sqrt(lam) rows penalize weights only, not the intercept column
    tail = np.hstack([np.sqrt(lam) * np.eye(d), np.zeros((d, 1))])
    A_aug = np.vstack([A, tail])
    y_aug = np.concatenate([y, np.zeros(d)])
    theta, _, rank, _ = np.linalg.lstsq(A_aug, y_aug, rcond=None)
    if rank < d + 1:
        # unreachable for lam > 0: the augmented system has full column rank
        raise SingularSystem("ridge-augmented system rank-deficient")
    return theta[:d], float(theta[d])


def mlp_loss_and_grad(model: Model, X: np.ndarray, y: np.ndarray):
    """Mean-squared-error loss and gradients for the 1-hidden-layer net."""
    n = X.shape[0]
    w1 = np.asarray(model.w1).reshape(model.d, model.h)
    b1 = np.asarray(model.b1)
    w2 = np.asarray(model.w2)
    z = X @ w1 + b1
    a = np.tanh(z)
    pred = a @ w2 + model.b2
    err = pred - y
    loss = float(np.mean(err ** 2))
    g_pred = 2.0 * err / n
    g_w2 = a.T @ g_pred
    g_b2 = float(np.sum(g_pred))
    g_a = np.outer(g_pred, w2)
    g_z = g_a * (1.0 - a ** 2)
    g_w1 = X.T @ g_z
    g_b1 = np.sum(g_z, axis=0)
    return loss, (g_w1, g_b1, g_w2, g_b2)


def recalibrate_auto(model: Model, corrections, schema: FeatureSchema | None = None) -> Model:
    """Refit from the correction set; version increments, caller retains
    the old model for rollback."""
    X, y = _as_xy(corrections)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionMismatch(
            f"corrections have {X.shape[1] if X.ndim == 2 else '?'} features, model wants {model.d}"
        )
    if model.kind is ModelKind.LINEAR:
        if X.shape[0] < model.d + 1:
            raise InsufficientData(
                f"need at least {model.d + 1} corrections, got {X.shape[0]}"
            )
        w, b = fit_linear_ridge(X, y)
        return replace(model, w=tuple(float(v) for v in w), b=b,
                       version=model.version + 1, trained_at=time.time())
    if X.shape[0] < 1:
        raise InsufficientData("need at least 1 correction")
    w1 = np.asarray(model.w1).reshape(model.d, model.h).copy()
    b1 = np.asarray(model.b1).copy()
    w2 = np.asarray(model.w2).copy()
    b2 = model.b2
    current = replace(model)
    for _ in range(MLP_EPOCHS):
        current = replace(
            current,
            w1=tuple(w1.reshape(-1)), b1=tuple(b1), w2=tuple(w2), b2=b2,
        )
        _, (g_w1, g_b1, g_w2, g_b2) = mlp_loss_and_grad(current, X, y)
        w1 -= MLP_LEARNING_RATE * g_w1
        b1 -= MLP_LEARNING_RATE * g_b1
        w2 -= MLP_LEARNING_RATE * g_w2
        b2 -= MLP_LEARNING_RATE * g_b2
    return replace(
        model,
        w1=tuple(float(v) for v in w1.reshape(-1)),
        b1=tuple(float(v) for v in b1),
        w2=tuple(float(v) for v in w2),
        b2=float(b2),
        version=model.version + 1,
        trained_at=time.time(),
    )


# --------------------------------------------------------------------------
# Artifact serialization (versioned JSON)
# --------------------------------------------------------------------------

def artifact_to_dict(artifact: ModelArtifact) -> dict:
    m = artifact.model
    doc: dict = {
        "format_version": artifact.format_version,
        "kind": m.kind.value,
        "d": m.d,
        "version": m.version,
        "trained_at": m.trained_at,
        "feature_schema_hash": m.feature_schema_hash,
        "metrics": dict(artifact.metrics),
        "schema": {
            "features": [
                {"name": f.name, "unit": f.unit, "required": f.required,
                 "min": f.min, "max": f.max}
                for f in artifact.schema.features
            ],
            "target_name": artifact.schema.target_name,
        },
    }
    if m.kind is ModelKind.LINEAR:
        doc["weights"] = {"w": list(m.w), "b": m.b}
    else:
        doc["h"] = m.h
        doc["weights"] = {"w1": list(m.w1), "b1": list(m.b1),
                          "w2": list(m.w2), "b2": m.b2}
    return doc


def serialize_model(artifact: ModelArtifact) -> bytes:
    return json.dumps(artifact_to_dict(artifact), sort_keys=True).encode()


def artifact_from_dict(doc: dict) -> ModelArtifact:
    from .config import FeatureSpec  # local to avoid a config->inference cycle

    try:
        fv = doc["format_version"]
        if fv != ARTIFACT_FORMAT_VERSION:
            raise FormatVersionUnsupported(fv)
        kind = ModelKind(doc["kind"])
        schema = FeatureSchema(
            features=tuple(
                FeatureSpec(f["name"], f.get("unit", ""), f.get("required", True),
                            f.get("min"), f.get("max"))
                for f in doc["schema"]["features"]
            ),
            target_name=doc["schema"]["target_name"],
        )
        weights = doc["weights"]
        if kind is ModelKind.LINEAR:
            model = Model(
                kind=kind, d=int(doc["d"]), version=int(doc["version"]),
                trained_at=float(doc["trained_at"]),
                feature_schema_hash=doc["feature_schema_hash"],
                w=tuple(float(v) for v in weights["w"]), b=float(weights["b"]),
            )
            if len(model.w) != model.d:
                raise CorruptArtifact("weight length disagrees with d")
        else:
            model = Model(
                kind=kind, d=int(doc["d"]), version=int(doc["version"]),
                trained_at=float(doc["trained_at"]),
                feature_schema_hash=doc["feature_schema_hash"],
                h=int(doc["h"]),
                w1=tuple(float(v) for v in weights["w1"]),
                b1=tuple(float(v) for v in weights["b1"]),
                w2=tuple(float(v) for v in weights["w2"]),
                b2=float(weights["b2"]),
            )
            if len(model.w1) != model.d * model.h or len(model.b1) != model.h \
                    or len(model.w2) != model.h:
                raise CorruptArtifact("MLP weight shapes disagree with (d, h)")
        return ModelArtifact(model=model, metrics=dict(doc.get("metrics", {})),
                             schema=schema, format_version=fv)
    except FormatVersionUnsupported:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifact(str(exc)) from exc


def deserialize_model(raw: bytes) -> ModelArtifact:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifact(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorruptArtifact("artifact document must be a JSON object")
    return artifact_from_dict(doc)


# --------------------------------------------------------------------------
# The inference agent
# --------------------------------------------------------------------------

class InferenceAgent:
    """Sequential consumer of the input topic.

    Every valid observation becomes a result message on the output topic;
    commands (recalibrate / swap / rollback) arrive on the command topic
    and are serialized onto the same consumer context, so a model swap is
    atomic with respect to result production.
    """

    def __init__(self, session: BusSession, model: Model, topics: TopicSet,
                 policy: DeviationPolicy, schema: FeatureSchema) -> None:
        self._session = session
        self._model = model
        self._topics = topics
        self._policy = policy
        self._schema = schema
        self._confidence = ConfidenceTracker()
        self._next_row_id = 1
        self._history: deque[Model] = deque(maxlen=ROLLBACK_DEPTH)
        self._lock = threading.Lock()
        self._input_sub = session.subscribe(topics.input, self._on_observation)
        self._command_sub = session.subscribe(topics.command, self._on_command)

    @property
    def model(self) -> Model:
        return self._model

    def stop(self) -> None:
        self._session.unsubscribe(self._input_sub)
        self._session.unsubscribe(self._command_sub)

    # -- message handlers ---------------------------------------------

    def _on_observation(self, envelope: Envelope) -> None:
        try:
            payload = json.loads(envelope.payload.decode("utf-8"))
            obs = validate_observation_against_schema(payload, self._schema)
        except (UnicodeDecodeError, json.JSONDecodeError, SchemaError) as exc:
            log.warning("dropped malformed observation: %s", exc)
            return
        missing = [n for n in self._schema.feature_names if n not in obs.features]
        if missing:
            log.warning("dropped observation missing features %s", missing)
            return
        with self._lock:
            model = self._model
        x = [obs.features[n] for n in self._schema.feature_names]
        residual = None
        if obs.target is not None:
            residual = _forward(model, np.asarray(x, dtype=float)) - obs.target
        conf = self._confidence.confidence(residual)
        pred = predict(model, x, row_id=self._next_row_id, confidence=conf)
        self._next_row_id += 1
        status = classify(pred, obs.target, self._policy)
        if obs.target is not None:
            self._confidence.observe(abs(pred.predicted - obs.target))
        result = {
            "row_id": pred.row_id,
            "observation": obs.to_payload(),
            "prediction": {
                "predicted": pred.predicted,
                "confidence": pred.confidence,
                "model_version": pred.model_version,
            },
            "status": status.value,
            "timing": {"ingest_ts": obs.ts, "published_ts": time.time()},
        }
        self._session.publish(self._topics.output,
                              json.dumps(result, sort_keys=True).encode())

    def _on_command(self, envelope: Envelope) -> None:
        try:
            doc = json.loads(envelope.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            log.warning("dropped malformed command: %s", exc)
            return
        if not isinstance(doc, dict) or "cmd" not in doc:
            return  # acks and foreign chatter share the command topic
        cmd = doc.get("cmd")
        if cmd == "recalibrate":
            self._handle_recalibrate(doc)
        elif cmd == "swap":
            self._handle_swap(doc)
        elif cmd == "rollback":
            self._handle_rollback(doc)
        else:
            log.warning("unknown command %r", cmd)

    def _handle_recalibrate(self, doc: dict) -> None:
        try:
            corrections = [
                ([float(c["features"][n]) for n in self._schema.feature_names],
                 float(c["target"]))
                for c in doc.get("corrections", [])
            ]
            with self._lock:
                old = self._model
                new = recalibrate_auto(old, corrections)
                self._history.append(old)
                self._model = new
            self._ack("recalibrate", ok=True, model_version=new.version)
            log.info("recalibrated: version %d -> %d", old.version, new.version)
        except Exception as exc:
            log.warning("recalibration failed: %s", exc)
            self._ack("recalibrate", ok=False, error=type(exc).__name__)

    def _handle_swap(self, doc: dict) -> None:
        try:
            artifact = artifact_from_dict(doc["artifact"])
        except (KeyError, CorruptArtifact, FormatVersionUnsupported) as exc:
            self._ack("swap", ok=False, error=type(exc).__name__)
            return
        if artifact.model.feature_schema_hash != self._schema.hash():
            self._ack("swap", ok=False, error="SchemaHashMismatch")
            return
        with self._lock:
            old = self._model
            version = max(artifact.model.version, old.version + 1)
            self._history.append(old)
            self._model = replace(artifact.model, version=version)
        self._ack("swap", ok=True, model_version=version)

    def _handle_rollback(self, doc: dict) -> None:
        wanted = doc.get("version")
        with self._lock:
            candidates = [m for m in self._history
                          if wanted is None or m.version == wanted]
            if not candidates:
                self._ack("rollback", ok=False, error="VersionNotRetained")
                return
            restored = candidates[-1]
            self._history.append(self._model)
            self._model = replace(restored, version=self._model.version + 1)
            version = self._model.version
        self._ack("rollback", ok=True, model_version=version)

    def _ack(self, cmd: str, ok: bool, **extra) -> None:
        doc = {"ack": cmd, "ok": ok, **extra}
        self._session.publish(self._topics.command,
                              json.dumps(doc, sort_keys=True).encode())


def run_inference_agent(session: BusSession, model: Model, topics: TopicSet,
                        policy: DeviationPolicy, schema: FeatureSchema) -> InferenceAgent:
    return InferenceAgent(session, model, topics, policy, schema)


# --------------------------------------------------------------------------
# HTTP prediction endpoint
# --------------------------------------------------------------------------

class ModelServer:
    """`POST /predict` and `GET /health` over a live model reference."""

    def __init__(self, model_source, schema: FeatureSchema, bind: str) -> None:
        # model_source: an InferenceAgent (live) or a fixed Model
        self._schema = schema
        if isinstance(model_source, InferenceAgent):
            self._get_model = lambda: model_source.model
        else:
            self._get_model = lambda: model_source
        host, _, port_s = bind.rpartition(":")
        try:
            self._server = ThreadingHTTPServer(
                (host or "127.0.0.1", int(port_s)), self._make_handler()
            )
        except (OSError, ValueError) as exc:
            raise BindError(f"cannot bind {bind}: {exc}") from exc
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="model-http", daemon=True
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def _make_handler(self):
        schema = self._schema
        get_model = self._get_model

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug("model-http: " + fmt, *args)

            def _reply(self, status: int, doc: dict) -> None:
                raw = json.dumps(doc).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_GET(self):
                if self.path == "/health":
                    self._reply(200, {"status": "ok",
                                      "model_version": get_model().version})
                else:
                    self._reply(404, {"error": "not found"})

            def do_POST(self):
                if self.path != "/predict":
                    self._reply(404, {"error": "not found"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    doc = json.loads(self.rfile.read(length).decode("utf-8"))
                    features = doc["features"]
                    x = [float(features[n]) for n in schema.feature_names]
                    if len(features) != len(schema.feature_names):
                        raise DimensionMismatch("extra feature keys")
                    pred = predict(get_model(), x)
                except (KeyError, TypeError, ValueError, json.JSONDecodeError,
                        DimensionMismatch, NonFiniteInput) as exc:
                    self._reply(400, {"error": str(exc) or type(exc).__name__})
                    return
                self._reply(200, {
                    "predicted": pred.predicted,
                    "confidence": pred.confidence,
                    "model_version": pred.model_version,
                })

        return Handler


def serve_model_http(model_source, schema: FeatureSchema, bind: str) -> ModelServer:
    return ModelServer(model_source, schema, bind)
