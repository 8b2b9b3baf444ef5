"""Pipeline designer: declare, validate, execute, schedule, and deploy
prep -> train -> evaluate -> export pipelines.

Pipelines are linear (no DAG) and declared as JSON. Stage outputs are
named; later stages may reference only the pipeline input or an earlier
output, which validation enforces before anything runs.
"""
from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .bus import BusSession, Envelope, TopicSet
from .config import DeviationMode, DeviationPolicy, FeatureSchema
from .errors import (
    DeployTimeout,
    SchemaHashMismatch,
    StageFailure,
    TargetUnreachable,
)
from .inference import (
    Model,
    ModelArtifact,
    ModelKind,
    artifact_to_dict,
    classify,
    fit_linear_ridge,
    mlp_loss_and_grad,
    predict,
    serialize_model,
)

log = logging.getLogger(__name__)

DEPLOY_ACK_TIMEOUT_S = 5.0

DATA_STAGES = {"drop_missing", "normalize", "export_csv", "export_json"}
TRAIN_STAGES = {"train_linear", "train_mlp"}
STAGE_KINDS = DATA_STAGES | TRAIN_STAGES | {"evaluate", "deploy"}


@dataclass(frozen=True)
class Stage:
    kind: str
    input_ref: str
    output_name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Trigger:
    kind: str  # manual | schedule | on_event
    interval_s: float | None = None
    topic: str | None = None


@dataclass(frozen=True)
class DeployTarget:
    mode: str  # local_agent | http_node | file
    url: str | None = None
    path: str | None = None


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    stages: tuple[Stage, ...]
    trigger: Trigger = field(default_factory=lambda: Trigger("manual"))
    target: DeployTarget = field(default_factory=lambda: DeployTarget("file", path="model.json"))


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class PipelineResult:
    artifact: ModelArtifact | None
    metrics: dict
    exports: list[str]


@dataclass(frozen=True)
class DeployReceipt:
    version: int
    target: str
    at: float

    def to_dict(self) -> dict:
        return {"version": self.version, "target": self.target, "at": self.at}


# --------------------------------------------------------------------------
# JSON form
# --------------------------------------------------------------------------

def pipeline_from_dict(doc: dict) -> PipelineSpec:
    trigger_doc = doc.get("trigger", {"kind": "manual"})
    trigger = Trigger(
        kind=str(trigger_doc.get("kind", "manual")),
        interval_s=trigger_doc.get("interval_s"),
        topic=trigger_doc.get("topic"),
    )
    target_doc = doc.get("target", {"mode": "file", "path": "model.json"})
    target = DeployTarget(
        mode=str(target_doc.get("mode", "file")),
        url=target_doc.get("url"),
        path=target_doc.get("path"),
    )
    stages = tuple(
        Stage(
            kind=str(s["kind"]),
            input_ref=str(s.get("input_ref", "input")),
            output_name=str(s.get("output_name", f"stage{i}")),
            params=dict(s.get("params", {})),
        )
        for i, s in enumerate(doc.get("stages", []))
    )
    return PipelineSpec(name=str(doc.get("name", "pipeline")), stages=stages,
                        trigger=trigger, target=target)


def pipeline_to_dict(spec: PipelineSpec) -> dict:
    trigger: dict = {"kind": spec.trigger.kind}
    if spec.trigger.interval_s is not None:
        trigger["interval_s"] = spec.trigger.interval_s
    if spec.trigger.topic is not None:
        trigger["topic"] = spec.trigger.topic
    target: dict = {"mode": spec.target.mode}
    if spec.target.url is not None:
        target["url"] = spec.target.url
    if spec.target.path is not None:
        target["path"] = spec.target.path
    return {
        "name": spec.name,
        "trigger": trigger,
        "target": target,
        "stages": [
            {"kind": s.kind, "input_ref": s.input_ref,
             "output_name": s.output_name, "params": s.params}
            for s in spec.stages
        ],
    }


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def validate_pipeline(spec: PipelineSpec) -> ValidationReport:
    errors: list[str] = []
    if not spec.stages:
        errors.append("EmptyPipeline: at least one stage is required")
    if spec.trigger.kind not in ("manual", "schedule", "on_event"):
        errors.append(f"UnknownTrigger: {spec.trigger.kind!r}")
    if spec.trigger.kind == "schedule" and not (
            isinstance(spec.trigger.interval_s, (int, float))
            and spec.trigger.interval_s > 0):
        errors.append("ParamOutOfRange: schedule trigger needs interval_s > 0")
    if spec.trigger.kind == "on_event" and not spec.trigger.topic:
        errors.append("ParamOutOfRange: on_event trigger needs a topic")
    if spec.target.mode not in ("local_agent", "http_node", "file"):
        errors.append(f"UnknownTarget: {spec.target.mode!r}")
    if spec.target.mode == "http_node":
        url = spec.target.url or ""
        if not (url.startswith("http://") or url.startswith("https://")):
            errors.append(f"ParamOutOfRange: malformed http_node url {url!r}")

    defined: dict[str, str] = {"input": "dataset"}  # name -> "dataset" | "model"
    train_count = 0
    deploy_count = 0
    for i, stage in enumerate(spec.stages):
        where = f"stages[{i}] ({stage.kind})"
        if stage.kind not in STAGE_KINDS:
            errors.append(f"UnknownStage: {where}")
            continue
        expected_input = "model" if stage.kind == "deploy" else "dataset"
        if stage.kind in TRAIN_STAGES or stage.kind == "evaluate":
            expected_input = "dataset"
        if stage.input_ref not in defined:
            errors.append(f"DanglingInputRef: {where} references undefined "
                          f"{stage.input_ref!r}")
        elif defined[stage.input_ref] != expected_input:
            errors.append(f"DanglingInputRef: {where} needs a {expected_input}, "
                          f"{stage.input_ref!r} is a {defined[stage.input_ref]}")
        if stage.output_name in defined:
            errors.append(f"DuplicateOutputName: {where} redefines "
                          f"{stage.output_name!r}")
        errors.extend(_check_params(stage, where))
        if stage.kind in TRAIN_STAGES:
            train_count += 1
        if stage.kind == "deploy":
            deploy_count += 1
        defined[stage.output_name] = "model" if stage.kind in TRAIN_STAGES else "dataset"
    if deploy_count and train_count != 1:
        errors.append("DeployWithoutTrain: exactly one train stage is required "
                      "when a deploy stage exists")
    return ValidationReport(tuple(errors))


def _check_params(stage: Stage, where: str) -> list[str]:
    p = stage.params
    errors = []
    if stage.kind == "normalize":
        if p.get("method", "zscore") not in ("zscore", "minmax"):
            errors.append(f"ParamOutOfRange: {where} method must be zscore|minmax")
    elif stage.kind == "train_linear":
        lam = p.get("ridge_lambda", 1e-6)
        if not (isinstance(lam, (int, float)) and lam >= 0):
            errors.append(f"ParamOutOfRange: {where} ridge_lambda must be >= 0")
    elif stage.kind == "train_mlp":
        if not (isinstance(p.get("h", 4), int) and p.get("h", 4) >= 1):
            errors.append(f"ParamOutOfRange: {where} h must be >= 1")
        if not (isinstance(p.get("epochs", 200), int) and p.get("epochs", 200) >= 1):
            errors.append(f"ParamOutOfRange: {where} epochs must be >= 1")
        lr = p.get("lr", 1e-2)
        if not (isinstance(lr, (int, float)) and lr > 0):
            errors.append(f"ParamOutOfRange: {where} lr must be > 0")
    elif stage.kind == "evaluate":
        frac = p.get("holdout_fraction", 0.2)
        if not (isinstance(frac, (int, float)) and 0 < frac < 1):
            errors.append(f"ParamOutOfRange: {where} holdout_fraction must be in (0, 1)")
    elif stage.kind in ("export_csv", "export_json"):
        if not p.get("path"):
            errors.append(f"ParamOutOfRange: {where} needs a 'path'")
    return errors


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------

Dataset = list[tuple[list[float], float | None]]


def run_pipeline(spec: PipelineSpec, dataset: Dataset,
                 schema: FeatureSchema | None = None, seed: int = 0,
                 session: BusSession | None = None,
                 topics: TopicSet | None = None) -> PipelineResult:
    """Execute stages sequentially; aborts on the first StageFailure.

    Deterministic for identical (spec, dataset, seed): the holdout split
    and MLP initialization are seeded and trained_at is pinned to 0 so
    artifact bytes are reproducible.
    """
    report = validate_pipeline(spec)
    if not report.valid:
        raise StageFailure("validate", ValueError("; ".join(report.errors)))
    schema = schema or _schema_for_width(len(dataset[0][0]) if dataset else 1)
    named: dict[str, object] = {"input": [(list(x), t) for x, t in dataset]}
    artifact: ModelArtifact | None = None
    model: Model | None = None
    metrics: dict = {}
    exports: list[str] = []

    for stage in spec.stages:
        try:
            if stage.kind == "drop_missing":
                named[stage.output_name] = _drop_missing(named[stage.input_ref])
            elif stage.kind == "normalize":
                named[stage.output_name] = _normalize(
                    named[stage.input_ref], stage.params.get("method", "zscore"))
            elif stage.kind == "train_linear":
                model = _train_linear(named[stage.input_ref], schema,
                                      float(stage.params.get("ridge_lambda", 1e-6)))
                named[stage.output_name] = model
            elif stage.kind == "train_mlp":
                model = _train_mlp(named[stage.input_ref], schema, seed,
                                   h=int(stage.params.get("h", 4)),
                                   epochs=int(stage.params.get("epochs", 200)),
                                   lr=float(stage.params.get("lr", 1e-2)))
                named[stage.output_name] = model
            elif stage.kind == "evaluate":
                if model is None:
                    raise ValueError("evaluate requires a trained model")
                metrics = _evaluate(model, named[stage.input_ref], stage.params, seed)
                named[stage.output_name] = named[stage.input_ref]
            elif stage.kind == "export_csv":
                exports.append(_export_csv(named[stage.input_ref], schema,
                                           stage.params["path"]))
                named[stage.output_name] = named[stage.input_ref]
            elif stage.kind == "export_json":
                exports.append(_export_json(named[stage.input_ref], schema,
                                            stage.params["path"]))
                named[stage.output_name] = named[stage.input_ref]
            elif stage.kind == "deploy":
                if model is None:
                    raise ValueError("deploy requires a trained model")
                artifact = ModelArtifact(model=model, metrics=metrics, schema=schema)
                deploy(artifact, spec.target, session=session, topics=topics)
                named[stage.output_name] = named.get("input")
        except StageFailure:
            raise
        except Exception as exc:
            raise StageFailure(stage.output_name, exc) from exc

    if artifact is None and model is not None:
        artifact = ModelArtifact(model=model, metrics=metrics, schema=schema)
    return PipelineResult(artifact=artifact, metrics=metrics, exports=exports)


def _schema_for_width(d: int) -> FeatureSchema:
    from .config import FeatureSpec

    return FeatureSchema(tuple(FeatureSpec(f"x{i}") for i in range(d)))


def _drop_missing(dataset: Dataset) -> Dataset:
    out = []
    for x, t in dataset:
        if t is None or not math.isfinite(t):
            continue
        if any(v is None or not math.isfinite(v) for v in x):
            continue
        out.append((x, t))
    return out


def _normalize(dataset: Dataset, method: str) -> Dataset:
    if not dataset:
        return []
    X = np.asarray([x for x, _ in dataset], dtype=float)
    if method == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        X = (X - lo) / span
    else:
        mean, std = X.mean(axis=0), X.std(axis=0)
        X = (X - mean) / np.maximum(std, 1e-12)  # constant columns -> all zero
    return [(list(map(float, row)), t) for row, (_, t) in zip(X, dataset)]


def _labeled(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(x, t) for x, t in dataset if t is not None]
    if not pairs:
        raise ValueError("no labeled rows to train on")
    X = np.asarray([x for x, _ in pairs], dtype=float)
    y = np.asarray([t for _, t in pairs], dtype=float)
    return X, y


def _train_linear(dataset: Dataset, schema: FeatureSchema, lam: float) -> Model:
    X, y = _labeled(dataset)
    w, b = fit_linear_ridge(X, y, lam=max(lam, 1e-12))
    return Model(
        kind=ModelKind.LINEAR, d=X.shape[1], version=1, trained_at=0.0,
        feature_schema_hash=schema.hash(),
        w=tuple(float(v) for v in w), b=float(b),
    )


def _train_mlp(dataset: Dataset, schema: FeatureSchema, seed: int,
               h: int, epochs: int, lr: float) -> Model:
    X, y = _labeled(dataset)
    d = X.shape[1]
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0, 1 / math.sqrt(d), size=(d, h))
    b1 = np.zeros(h)
    w2 = rng.normal(0, 1 / math.sqrt(h), size=h)
    b2 = 0.0
    model = Model(kind=ModelKind.MLP1H, d=d, version=1, trained_at=0.0,
                  feature_schema_hash=schema.hash(), h=h,
                  w1=tuple(w1.reshape(-1)), b1=tuple(b1), w2=tuple(w2), b2=b2)
    for _ in range(epochs):
        _, (g_w1, g_b1, g_w2, g_b2) = mlp_loss_and_grad(model, X, y)
        w1 -= lr * g_w1
        b1 -= lr * g_b1
        w2 -= lr * g_w2
        b2 -= lr * g_b2
        model = Model(kind=ModelKind.MLP1H, d=d, version=1, trained_at=0.0,
                      feature_schema_hash=schema.hash(), h=h,
                      w1=tuple(float(v) for v in w1.reshape(-1)),
                      b1=tuple(float(v) for v in b1),
                      w2=tuple(float(v) for v in w2), b2=float(b2))
    return model


def _evaluate(model: Model, dataset: Dataset, params: dict, seed: int) -> dict:
    frac = float(params.get("holdout_fraction", 0.2))
    policy_doc = params.get("policy", {})
    policy = DeviationPolicy(
        DeviationMode(policy_doc.get("mode", "absolute")),
        float(policy_doc.get("threshold", 1.0)),
    )
    pairs = [(x, t) for x, t in dataset if t is not None]
    n = len(pairs)
    if n < 2:
        raise ValueError("evaluate needs at least 2 labeled rows")
    if params.get("shuffle"):
        random.Random(seed).shuffle(pairs)
    k = math.ceil(frac * n)
    holdout = pairs[n - k:]  # last rows, time-ordered
    errs = []
    ok = 0
    for x, t in holdout:
        p = predict(model, x).predicted
        errs.append((p - t) ** 2)
        if classify(p, t, policy).value == "OK":
            ok += 1
    return {
        "mse": float(np.mean(errs)),
        "accuracy": ok / len(holdout),
        "holdout_rows": len(holdout),
    }


def _export_csv(dataset: Dataset, schema: FeatureSchema, path: str) -> str:
    lines = [",".join(schema.feature_names + [schema.target_name])]
    for x, t in dataset:
        lines.append(",".join([repr(float(v)) for v in x]
                              + ["" if t is None else repr(float(t))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _export_json(dataset: Dataset, schema: FeatureSchema, path: str) -> str:
    doc = [
        {"features": dict(zip(schema.feature_names, map(float, x))),
         "target": None if t is None else float(t)}
        for x, t in dataset
    ]
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return str(path)


# --------------------------------------------------------------------------
# Deployment
# --------------------------------------------------------------------------

def deploy(artifact: ModelArtifact, target: DeployTarget,
           session: BusSession | None = None,
           topics: TopicSet | None = None) -> DeployReceipt:
    """Push an artifact to its target; returns a receipt on acknowledgment."""
    if target.mode == "file":
        path = Path(target.path or "model.json")
        path.write_bytes(serialize_model(artifact))
        return DeployReceipt(artifact.model.version, f"file:{path}", time.time())

    if target.mode == "http_node":
        url = (target.url or "").rstrip("/") + "/deploy"
        try:
            response = httpx.post(url, json=artifact_to_dict(artifact),
                                  timeout=DEPLOY_ACK_TIMEOUT_S)
        except httpx.TimeoutException as exc:
            raise DeployTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TargetUnreachable(f"{url}: {exc}") from exc
        if response.status_code != 200:
            raise TargetUnreachable(f"{url} returned HTTP {response.status_code}")
        version = response.json().get("model_version", artifact.model.version)
        return DeployReceipt(int(version), f"http:{target.url}", time.time())

    if target.mode == "local_agent":
        if session is None or topics is None:
            raise TargetUnreachable("local_agent deploy needs a bus session and topics")
        ack_event = threading.Event()
        ack_box: dict = {}

        def on_command(envelope: Envelope) -> None:
            try:
                doc = json.loads(envelope.payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                return
            if isinstance(doc, dict) and doc.get("ack") == "swap":
                ack_box.update(doc)
                ack_event.set()

        handle = session.subscribe(topics.command, on_command)
        try:
            command = {"cmd": "swap", "artifact": artifact_to_dict(artifact)}
            session.publish(topics.command, json.dumps(command, sort_keys=True).encode())
            if not ack_event.wait(timeout=DEPLOY_ACK_TIMEOUT_S):
                raise DeployTimeout("no swap acknowledgment from inference agent")
        finally:
            session.unsubscribe(handle)
        if not ack_box.get("ok"):
            error = ack_box.get("error", "unknown")
            if error == "SchemaHashMismatch":
                raise SchemaHashMismatch("agent runs a different feature schema")
            raise TargetUnreachable(f"agent rejected swap: {error}")
        return DeployReceipt(int(ack_box["model_version"]), "local_agent", time.time())

    raise TargetUnreachable(f"unknown deploy target mode {target.mode!r}")


# --------------------------------------------------------------------------
# Scheduling
# --------------------------------------------------------------------------

class ScheduleHandle:
    """Fires `runner(spec)` on a timer or per bus event; overlapping runs
    are skipped, never queued."""

    def __init__(self, spec: PipelineSpec, runner,
                 session: BusSession | None = None) -> None:
        if spec.trigger.kind == "manual":
            raise ValueError("manual pipelines are not schedulable")
        self._spec = spec
        self._runner = runner
        self._stop = threading.Event()
        self._running = threading.Lock()
        self.runs = 0
        self.skipped_runs = 0
        self._sub = None
        self._session = session
        if spec.trigger.kind == "schedule":
            self._thread = threading.Thread(target=self._timer_loop,
                                            name="pipeline-schedule", daemon=True)
            self._thread.start()
        else:
            if session is None:
                raise ValueError("on_event trigger needs a bus session")
            self._thread = None
            self._sub = session.subscribe(spec.trigger.topic, self._on_event)

    def stop(self) -> None:
        self._stop.set()
        if self._sub is not None and self._session is not None:
            self._session.unsubscribe(self._sub)
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _fire(self) -> None:
        # worker thread per trigger keeps the timer cadence fixed and lets
        # an overlapping trigger be skipped instead of queued
        threading.Thread(target=self._run_once, daemon=True).start()

    def _run_once(self) -> None:
        if not self._running.acquire(blocking=False):
            self.skipped_runs += 1
            return
        try:
            self.runs += 1
            self._runner(self._spec)
        except Exception:
            log.exception("scheduled pipeline run failed")
        finally:
            self._running.release()

    def _timer_loop(self) -> None:
        interval = float(self._spec.trigger.interval_s)
        next_due = time.monotonic() + interval
        while not self._stop.wait(timeout=max(next_due - time.monotonic(), 0)):
            next_due += interval
            self._fire()

    def _on_event(self, envelope: Envelope) -> None:
        self._fire()


def schedule(spec: PipelineSpec, runner,
             session: BusSession | None = None) -> ScheduleHandle:
    return ScheduleHandle(spec, runner, session)
