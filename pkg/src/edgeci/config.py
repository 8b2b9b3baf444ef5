"""Deployment configuration: loading, validation, topic derivation, and
observation-vs-schema checks.

The config is a single JSON document. It is immutable after load and safe
to share across threads; restart the process to reconfigure (prompt
templates are the one hot-reloadable exception, handled in `genai`).
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import (
    MissingRequiredField,
    OutOfBounds,
    ParseError,
    TypeMismatch,
    UnknownField,
    ValidationError,
)

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

# Denominator guard for percentage deviations: below this magnitude the
# actual value cannot anchor a relative error, fall back to absolute.
PERCENTAGE_FALLBACK_EPS = 1e-9


class DeviationMode(str, Enum):
    ABSOLUTE = "absolute"
    PERCENTAGE = "percentage"


@dataclass(frozen=True)
class DeviationPolicy:
    mode: DeviationMode
    threshold: float

    def deviation(self, predicted: float, actual: float) -> float:
        """Deviation of `predicted` from `actual` under this policy's scale."""
        err = abs(predicted - actual)
        if self.mode is DeviationMode.PERCENTAGE and abs(actual) >= PERCENTAGE_FALLBACK_EPS:
            return err / abs(actual)
        return err

    def exceeded(self, predicted: float, actual: float) -> bool:
        return self.deviation(predicted, actual) > self.threshold


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    unit: str = ""
    required: bool = True
    min: float | None = None
    max: float | None = None


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    target_name: str = "target"

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    def hash(self) -> str:
        """Stable digest of the feature layout; models are pinned to it."""
        doc = {
            "features": [
                {"name": f.name, "unit": f.unit, "required": f.required, "min": f.min, "max": f.max}
                for f in self.features
            ],
            "target_name": self.target_name,
        }
        raw = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass(frozen=True)
class GenAiConfig:
    endpoint_url: str = "http://127.0.0.1:9741/v1/chat/completions"
    api_key_env_var: str = "EDGECI_LLM_API_KEY"
    template_dir: str = "templates"
    request_timeout_ms: int = 5000
    few_shot_k: int = 0
    batch_size: int = 1


@dataclass(frozen=True)
class DeploymentConfig:
    broker_host: str
    broker_port: int = 1883
    client_id: str = "edgeci"
    topic_prefix: str = ""
    input_topic: str = "inputTopic"
    output_topic: str = "outputTopic"
    command_topic: str = "commandTopic"
    gateway_bind: str = "127.0.0.1:8080"
    replay_rate_hz: float = 1.0
    deviation_policy: DeviationPolicy = field(
        default_factory=lambda: DeviationPolicy(DeviationMode.ABSOLUTE, 1.0)
    )
    feature_schema: FeatureSchema = field(
        default_factory=lambda: FeatureSchema((FeatureSpec("value"),))
    )
    genai: GenAiConfig = field(default_factory=GenAiConfig)


@dataclass(frozen=True)
class Observation:
    """One timestamped sensor reading; features keyed and ordered per schema."""

    ts: float
    features: dict[str, float]
    target: float | None = None

    def to_payload(self) -> dict:
        doc: dict = {"ts": self.ts, "features": dict(self.features)}
        if self.target is not None:
            doc["target"] = self.target
        return doc


_TOP_LEVEL_KEYS = {
    "broker_host", "broker_port", "client_id", "topic_prefix",
    "input_topic", "output_topic", "command_topic", "gateway_bind",
    "replay_rate_hz", "deviation_policy", "features", "target_name", "genai",
}


def load_config(path: str | Path) -> DeploymentConfig:
    """Load and validate a JSON deployment config file."""
    text = Path(path).read_text(encoding="utf-8")
    return loads_config(text)


def loads_config(text: str) -> DeploymentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), line=exc.lineno, offset=exc.colno) from exc
    if not isinstance(doc, dict):
        raise ParseError("config document must be a JSON object")
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> DeploymentConfig:
    for key in doc:
        if key not in _TOP_LEVEL_KEYS:
            raise ValidationError(key, "unknown config key")
    if "broker_host" not in doc:
        raise ValidationError("broker_host", "required field missing")
    broker_host = _expect_str(doc, "broker_host")
    if not broker_host:
        raise ValidationError("broker_host", "must be non-empty")

    broker_port = _expect_int(doc, "broker_port", default=1883)
    if not 1 <= broker_port <= 65535:
        raise ValidationError("broker_port", f"port {broker_port} outside [1, 65535]")

    replay_rate_hz = _expect_number(doc, "replay_rate_hz", default=1.0)
    if not replay_rate_hz > 0:
        raise ValidationError("replay_rate_hz", "must be > 0")

    client_id = _expect_str(doc, "client_id", default="edgeci")
    if not client_id:
        raise ValidationError("client_id", "must be non-empty")

    schema = _parse_schema(doc)
    policy = _parse_policy(doc.get("deviation_policy"))
    genai = _parse_genai(doc.get("genai"))

    config = DeploymentConfig(
        broker_host=broker_host,
        broker_port=broker_port,
        client_id=client_id,
        topic_prefix=_expect_str(doc, "topic_prefix", default=""),
        input_topic=_expect_str(doc, "input_topic", default="inputTopic"),
        output_topic=_expect_str(doc, "output_topic", default="outputTopic"),
        command_topic=_expect_str(doc, "command_topic", default="commandTopic"),
        gateway_bind=_expect_str(doc, "gateway_bind", default="127.0.0.1:8080"),
        replay_rate_hz=float(replay_rate_hz),
        deviation_policy=policy,
        feature_schema=schema,
        genai=genai,
    )
    topics = derive_topics(config)
    if len({topics.input, topics.output, topics.command}) != 3:
        raise ValidationError("input_topic", "input/output/command topics must be pairwise distinct")
    return config


def config_to_dict(config: DeploymentConfig) -> dict:
    return {
        "broker_host": config.broker_host,
        "broker_port": config.broker_port,
        "client_id": config.client_id,
        "topic_prefix": config.topic_prefix,
        "input_topic": config.input_topic,
        "output_topic": config.output_topic,
        "command_topic": config.command_topic,
        "gateway_bind": config.gateway_bind,
        "replay_rate_hz": config.replay_rate_hz,
        "deviation_policy": {
            "mode": config.deviation_policy.mode.value,
            "threshold": config.deviation_policy.threshold,
        },
        "features": [
            {k: v for k, v in
             {"name": f.name, "unit": f.unit, "required": f.required,
              "min": f.min, "max": f.max}.items()
             if v is not None}
            for f in config.feature_schema.features
        ],
        "target_name": config.feature_schema.target_name,
        "genai": {
            "endpoint_url": config.genai.endpoint_url,
            "api_key_env_var": config.genai.api_key_env_var,
            "template_dir": config.genai.template_dir,
            "request_timeout_ms": config.genai.request_timeout_ms,
            "few_shot_k": config.genai.few_shot_k,
            "batch_size": config.genai.batch_size,
        },
    }


def serialize_config(config: DeploymentConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2)


@dataclass(frozen=True)
class TopicSet:
    input: str
    output: str
    command: str


def derive_topics(config: DeploymentConfig) -> TopicSet:
    """Fully-qualified topic names `<prefix>/<name>` (bare name if no prefix)."""
    def qualify(name: str) -> str:
        return f"{config.topic_prefix}/{name}" if config.topic_prefix else name

    return TopicSet(
        input=qualify(config.input_topic),
        output=qualify(config.output_topic),
        command=qualify(config.command_topic),
    )


def validate_observation_against_schema(payload: dict, schema: FeatureSchema) -> Observation:
    """Strict-mode validation of a parsed payload document.

    Accepts only schema feature names, the target name, and `ts`. Every
    present value must be a finite number within the feature's bounds.
    """
    if not isinstance(payload, dict):
        raise TypeMismatch("<payload>", payload)
    features_doc = payload.get("features", payload)
    if not isinstance(features_doc, dict):
        raise TypeMismatch("features", features_doc)

    known = set(schema.feature_names)
    for key in features_doc:
        if key not in known and key != schema.target_name:
            if features_doc is payload and key in ("ts", "features", "target"):
                continue
            raise UnknownField(key)
    if features_doc is not payload:
        for key in payload:
            if key not in ("ts", "features", "target"):
                raise UnknownField(key)

    features: dict[str, float] = {}
    for spec in schema.features:
        if spec.name not in features_doc:
            if spec.required:
                raise MissingRequiredField(spec.name)
            continue
        value = _as_finite(spec.name, features_doc[spec.name])
        if (spec.min is not None and value < spec.min) or (
            spec.max is not None and value > spec.max
        ):
            raise OutOfBounds(spec.name, value, spec.min, spec.max)
        features[spec.name] = value

    target = None
    raw_target = payload.get("target", features_doc.get(schema.target_name))
    if raw_target is not None:
        target = _as_finite(schema.target_name, raw_target)

    ts = payload.get("ts")
    ts = _as_finite("ts", ts) if ts is not None else time.time()
    return Observation(ts=ts, features=features, target=target)


def _as_finite(name: str, value: object) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeMismatch(name, value)
    out = float(value)
    if not math.isfinite(out):
        raise TypeMismatch(name, value)
    return out


def _parse_schema(doc: dict) -> FeatureSchema:
    raw = doc.get("features")
    if not raw or not isinstance(raw, list):
        raise ValidationError("features", "at least one feature is required")
    specs = []
    seen: set[str] = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "name" not in item:
            raise ValidationError(f"features[{i}]", "feature entries need a 'name'")
        name = item["name"]
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise ValidationError(f"features[{i}].name", f"invalid feature name {name!r}")
        if name in seen:
            raise ValidationError(f"features[{i}].name", f"duplicate feature name {name!r}")
        seen.add(name)
        min_ = item.get("min")
        max_ = item.get("max")
        for bound, label in ((min_, "min"), (max_, "max")):
            if bound is not None and (isinstance(bound, bool) or not isinstance(bound, (int, float))):
                raise ValidationError(f"features[{i}].{label}", "bounds must be numbers")
        if min_ is not None and max_ is not None and not min_ < max_:
            raise ValidationError(f"features[{i}]", f"min {min_} must be < max {max_}")
        specs.append(FeatureSpec(
            name=name,
            unit=str(item.get("unit", "")),
            required=bool(item.get("required", True)),
            min=None if min_ is None else float(min_),
            max=None if max_ is None else float(max_),
        ))
    target_name = doc.get("target_name", "target")
    if not isinstance(target_name, str) or not target_name:
        raise ValidationError("target_name", "must be a non-empty string")
    if target_name in seen:
        raise ValidationError("target_name", f"{target_name!r} collides with a feature name")
    return FeatureSchema(features=tuple(specs), target_name=target_name)


def _parse_policy(raw: object) -> DeviationPolicy:
    if raw is None:
        return DeviationPolicy(DeviationMode.ABSOLUTE, 1.0)
    if not isinstance(raw, dict):
        raise ValidationError("deviation_policy", "must be an object")
    mode_raw = raw.get("mode", "absolute")
    try:
        mode = DeviationMode(mode_raw)
    except ValueError:
        raise ValidationError("deviation_policy.mode", f"unknown mode {mode_raw!r}") from None
    threshold = raw.get("threshold")
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)) or not threshold > 0:
        raise ValidationError("deviation_policy.threshold", "must be a positive number")
    threshold = float(threshold)
    if mode is DeviationMode.PERCENTAGE and threshold > 1:
        raise ValidationError(
            "deviation_policy.threshold", "percentage threshold is a fraction in (0, 1]"
        )
    return DeviationPolicy(mode, threshold)


def _parse_genai(raw: object) -> GenAiConfig:
    if raw is None:
        return GenAiConfig()
    if not isinstance(raw, dict):
        raise ValidationError("genai", "must be an object")
    defaults = GenAiConfig()
    timeout_ms = raw.get("request_timeout_ms", defaults.request_timeout_ms)
    if not isinstance(timeout_ms, int) or isinstance(timeout_ms, bool) or timeout_ms <= 0:
        raise ValidationError("genai.request_timeout_ms", "must be a positive integer")
    few_shot_k = raw.get("few_shot_k", defaults.few_shot_k)
    if not isinstance(few_shot_k, int) or isinstance(few_shot_k, bool) or few_shot_k < 0:
        raise ValidationError("genai.few_shot_k", "must be a non-negative integer")
    batch_size = raw.get("batch_size", defaults.batch_size)
    if not isinstance(batch_size, int) or isinstance(batch_size, bool) or batch_size < 1:
        raise ValidationError("genai.batch_size", "must be >= 1")
    return GenAiConfig(
        endpoint_url=str(raw.get("endpoint_url", defaults.endpoint_url)),
        api_key_env_var=str(raw.get("api_key_env_var", defaults.api_key_env_var)),
        template_dir=str(raw.get("template_dir", defaults.template_dir)),
        request_timeout_ms=timeout_ms,
        few_shot_k=few_shot_k,
        batch_size=batch_size,
    )


def _expect_str(doc: dict, key: str, default: str | None = None) -> str:
    value = doc.get(key, default)
    if not isinstance(value, str):
        raise ValidationError(key, f"expected a string, got {value!r}")
    return value


def _expect_int(doc: dict, key: str, default: int) -> int:
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(key, f"expected an integer, got {value!r}")
    return value


def _expect_number(doc: dict, key: str, default: float) -> float:
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(key, f"expected a number, got {value!r}")
    return float(value)
