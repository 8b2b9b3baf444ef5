"""GenAI explanation agent: deviation triggering, prompt templating, LLM
transport, the AI-assisted labeling buffer, and the bus-driven agent.

LLM calls are strictly off the hot path: the agent dispatches them to a
bounded worker pool and merges answers back by row id, so a slow or dead
endpoint never delays result publication. Failed calls surface honestly
as "unavailable: <reason>" explanations.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import httpx

from .bus import BusSession, Envelope, TopicSet
from .config import DeviationPolicy, GenAiConfig
from .errors import (
    HttpError,
    LlmError,
    LlmTimeout,
    MalformedResponse,
    MissingApiKey,
    TemplateParseError,
    UnboundPlaceholder,
)

log = logging.getLogger(__name__)

ALLOWED_PLACEHOLDERS = {
    "features", "predicted", "expected", "confidence", "instructions", "exemplars",
}
_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
_TAG_RE = re.compile(r"<label>(.*?)</label>", re.DOTALL)

MAX_CONCURRENT_LLM_CALLS = 4
DEFAULT_BUFFER_CAPACITY = 256

DEFAULT_TEMPLATE_BODY = (
    "A deployed model predicted {{predicted}} where {{expected}} was expected "
    "(confidence {{confidence}}). Sensor readings: {{features}}. "
    "{{instructions}}\n{{exemplars}}\n"
    "Explain the most likely cause of this deviation in one short paragraph."
)


class TaskType(str, Enum):
    EXPLAIN_PREDICTION = "explain_prediction"
    ASSIST_LABELING = "assist_labeling"


class ResponseFormat(str, Enum):
    PLAIN_TEXT = "plain_text"
    STRUCTURED_TAGS = "structured_tags"


@dataclass(frozen=True)
class ExplanationRequest:
    row_id: int
    features: dict[str, float]
    predicted: float
    expected: float
    confidence: float
    task_type: TaskType = TaskType.EXPLAIN_PREDICTION
    response_format: ResponseFormat = ResponseFormat.PLAIN_TEXT
    domain_instructions: str = ""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    loaded_from: str = "<builtin>"
    loaded_at: float = 0.0

    def __post_init__(self) -> None:
        if not self.body:
            raise UnboundPlaceholder("<empty body>")
        for match in _PLACEHOLDER_RE.finditer(self.body):
            if match.group(1) not in ALLOWED_PLACEHOLDERS:
                raise UnboundPlaceholder(match.group(1))


DEFAULT_TEMPLATE = PromptTemplate("default", DEFAULT_TEMPLATE_BODY)


@dataclass(frozen=True)
class Explanation:
    row_id: int
    text: str
    model_name: str
    received_at: float
    flags_recalibration: bool


class LabelingBuffer:
    """Bounded FIFO of unlabeled/weakly-labeled rows plus labeled exemplars."""

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY) -> None:
        self._entries: deque = deque(maxlen=capacity)
        self.exemplars: list[tuple[dict, float]] = []

    def add(self, entry) -> None:
        self._entries.append(entry)

    def add_exemplar(self, features: dict, label: float) -> None:
        self.exemplars.append((features, label))

    def drain(self, n: int) -> list:
        out = []
        while self._entries and len(out) < n:
            out.append(self._entries.popleft())
        return out

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


# --------------------------------------------------------------------------
# Triggering and prompt construction
# --------------------------------------------------------------------------

def should_trigger(predicted: float, expected: float, policy: DeviationPolicy) -> bool:
    """Same rule that flags a row Non-OK; kept as the single source of truth."""
    return policy.exceeded(predicted, expected)


def format_number(value: float) -> str:
    """Shortest round-trip decimal; integral floats lose the trailing .0."""
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def _render_features(features: dict[str, float]) -> str:
    return ", ".join(f"{k}={format_number(v)}" for k, v in features.items())


def _render_exemplars(exemplars: list[tuple[dict, float]], k: int) -> str:
    lines = [
        f"example: {_render_features(f)} -> label {format_number(label)}"
        for f, label in exemplars[:k]
    ]
    return "\n".join(lines)


def build_prompt(template: PromptTemplate, request: ExplanationRequest,
                 exemplars: list[tuple[dict, float]] | None = None,
                 few_shot_k: int = 0) -> dict:
    """Render the template into the JSON payload for the LLM endpoint."""
    values = {
        "features": _render_features(request.features),
        "predicted": format_number(request.predicted),
        "expected": format_number(request.expected),
        "confidence": format_number(request.confidence),
        "instructions": request.domain_instructions,
        "exemplars": _render_exemplars(exemplars or [], few_shot_k),
    }

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in ALLOWED_PLACEHOLDERS:
            raise UnboundPlaceholder(name)
        return values[name]

    return {
        "prompt": _PLACEHOLDER_RE.sub(substitute, template.body),
        "metadata": {
            "task_type": request.task_type.value,
            "response_format": request.response_format.value,
            "domain_instructions": request.domain_instructions,
        },
    }


# --------------------------------------------------------------------------
# LLM transport
# --------------------------------------------------------------------------

class LlmClient:
    """Minimal chat-completion-style HTTP client; endpoint pluggable so any
    compatible provider or a local mock will do. The API key is only ever
    read from the environment variable named in config."""

    def __init__(self, config: GenAiConfig, model_name: str = "external-llm") -> None:
        self._config = config
        self.model_name = model_name
        self._client = httpx.Client(
            timeout=config.request_timeout_ms / 1000.0
        )

    def close(self) -> None:
        self._client.close()

    def request_explanation(self, payload: dict, row_id: int) -> Explanation:
        api_key = os.environ.get(self._config.api_key_env_var)
        if not api_key:
            raise MissingApiKey(
                f"environment variable {self._config.api_key_env_var} is not set"
            )
        body = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": payload["prompt"]}],
            "metadata": payload.get("metadata", {}),
        }
        try:
            response = self._client.post(
                self._config.endpoint_url,
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
            )
        except httpx.TimeoutException as exc:
            raise LlmTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise MalformedResponse(f"transport failure: {exc}") from exc
        if response.status_code != 200:
            raise HttpError(response.status_code)
        try:
            doc = response.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise MalformedResponse(f"non-JSON response: {exc}") from exc
        text = _extract_text(doc)
        fmt = payload.get("metadata", {}).get("response_format")
        if fmt == ResponseFormat.STRUCTURED_TAGS.value:
            tags = _TAG_RE.findall(text)
            if tags:  # anything else degrades to plain text
                text = "\n".join(t.strip() for t in tags)
        if not text:
            raise MalformedResponse("empty explanation text")
        return Explanation(
            row_id=row_id, text=text, model_name=self.model_name,
            received_at=time.time(), flags_recalibration=True,
        )


def _extract_text(doc) -> str:
    if isinstance(doc, dict):
        choices = doc.get("choices")
        if isinstance(choices, list) and choices:
            message = choices[0].get("message", {})
            content = message.get("content")
            if isinstance(content, str):
                return content
        if isinstance(doc.get("text"), str):
            return doc["text"]
    raise MalformedResponse(f"unrecognized response shape: {type(doc).__name__}")


def request_explanation(client: LlmClient, payload: dict, row_id: int = 0) -> Explanation:
    return client.request_explanation(payload, row_id)


# --------------------------------------------------------------------------
# Template store (hot reload)
# --------------------------------------------------------------------------

class TemplateStore:
    """All-or-nothing reload: a failing reload leaves the active set intact."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._templates: dict[str, PromptTemplate] = {}

    def get(self, name: str) -> PromptTemplate:
        with self._lock:
            return self._templates.get(name) \
                or self._templates.get("default") \
                or DEFAULT_TEMPLATE

    def all(self) -> dict[str, PromptTemplate]:
        with self._lock:
            return dict(self._templates)

    def reload(self, directory: str | Path) -> list[PromptTemplate]:
        directory = Path(directory)
        fresh: dict[str, PromptTemplate] = {}
        for file in sorted(directory.iterdir()):
            if not file.is_file():
                continue
            try:
                body = file.read_text(encoding="utf-8")
                template = PromptTemplate(
                    name=file.stem, body=body,
                    loaded_from=str(file), loaded_at=time.time(),
                )
            except (OSError, UnicodeDecodeError, UnboundPlaceholder) as exc:
                raise TemplateParseError(str(file), exc) from exc
            fresh[template.name] = template
        if not fresh:
            log.warning("template directory %s is empty; using built-in default",
                        directory)
        with self._lock:
            self._templates = fresh
        return list(fresh.values())


def reload_templates(directory: str | Path,
                     store: TemplateStore | None = None) -> list[PromptTemplate]:
    store = store or TemplateStore()
    return store.reload(directory)


# --------------------------------------------------------------------------
# The GenAI agent
# --------------------------------------------------------------------------

class GenAiAgent:
    """Watches the output topic; Non-OK rows get an explanation request.

    The deviation monitor is a sequential consumer; outbound calls run on
    a bounded pool. In AssistLabeling mode with batch_size > 1, flagged
    rows are batched into a single prompt (responses map back to
    instances positionally)."""

    def __init__(self, session: BusSession, topics: TopicSet, config: GenAiConfig,
                 policy: DeviationPolicy, client: LlmClient | None = None,
                 task_type: TaskType = TaskType.EXPLAIN_PREDICTION,
                 templates: TemplateStore | None = None) -> None:
        self._session = session
        self._topics = topics
        self._config = config
        self._policy = policy
        self._task_type = task_type
        self._client = client or LlmClient(config)
        self.templates = templates or TemplateStore()
        template_dir = Path(config.template_dir)
        if template_dir.is_dir():
            try:
                self.templates.reload(template_dir)
            except TemplateParseError as exc:
                log.warning("template load failed, using built-in default: %s", exc)
        self.buffer = LabelingBuffer()
        self._pool = ThreadPoolExecutor(
            max_workers=MAX_CONCURRENT_LLM_CALLS, thread_name_prefix="genai"
        )
        self._pending_batch: list[ExplanationRequest] = []
        self.llm_calls = 0
        self._sub = session.subscribe(topics.output, self._on_result)

    def stop(self) -> None:
        self._session.unsubscribe(self._sub)
        self._pool.shutdown(wait=True)
        self._client.close()

    def drain(self, timeout_s: float = 10.0) -> None:
        """Test hook: wait for in-flight LLM work to finish."""
        self._pool.shutdown(wait=True)
        self._pool = ThreadPoolExecutor(
            max_workers=MAX_CONCURRENT_LLM_CALLS, thread_name_prefix="genai"
        )

    # -- message handling ---------------------------------------------

    def _on_result(self, envelope: Envelope) -> None:
        try:
            doc = json.loads(envelope.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        if not isinstance(doc, dict) or "prediction" not in doc:
            return  # explanation messages share this topic
        if doc.get("status") != "NonOK":
            return
        obs = doc.get("observation", {})
        target = obs.get("target")
        if target is None:
            return
        request = ExplanationRequest(
            row_id=int(doc["row_id"]),
            features=dict(obs.get("features", {})),
            predicted=float(doc["prediction"]["predicted"]),
            expected=float(target),
            confidence=float(doc["prediction"].get("confidence", 0.0)),
            task_type=self._task_type,
            response_format=ResponseFormat.PLAIN_TEXT,
        )
        if self._task_type is TaskType.ASSIST_LABELING and self._config.batch_size > 1:
            self._pending_batch.append(request)
            self.buffer.add(request)
            if len(self._pending_batch) >= self._config.batch_size:
                batch, self._pending_batch = self._pending_batch, []
                self._pool.submit(self._call_batch, batch)
            return
        self._pool.submit(self._call_single, request)

    def _call_single(self, request: ExplanationRequest) -> None:
        template = self.templates.get(self._task_type.value)
        payload = build_prompt(template, request, self.buffer.exemplars,
                               self._config.few_shot_k)
        self.llm_calls += 1
        try:
            explanation = self._client.request_explanation(payload, request.row_id)
        except LlmError as exc:
            log.warning("explanation for row %d unavailable: %s", request.row_id, exc)
            explanation = Explanation(
                row_id=request.row_id,
                text=f"unavailable: {exc.reason}",
                model_name=self._client.model_name,
                received_at=time.time(),
                flags_recalibration=True,
            )
        self._publish(explanation)

    def _call_batch(self, batch: list[ExplanationRequest]) -> None:
        template = self.templates.get(self._task_type.value)
        # one prompt carrying every instance; exemplars first, per few-shot k
        instance_lines = "\n".join(
            f"instance {i}: {_render_features(r.features)} "
            f"(predicted {format_number(r.predicted)}, expected {format_number(r.expected)})"
            for i, r in enumerate(batch)
        )
        lead = replace_instructions(batch[0], instance_lines)
        payload = build_prompt(template, lead, self.buffer.exemplars,
                               self._config.few_shot_k)
        self.llm_calls += 1
        try:
            explanation = self._client.request_explanation(payload, batch[0].row_id)
            # positional mapping: line i of the answer belongs to instance i
            lines = [l for l in explanation.text.splitlines() if l.strip()]
            for i, request in enumerate(batch):
                text = lines[i] if i < len(lines) else explanation.text
                self._publish(Explanation(
                    row_id=request.row_id, text=text,
                    model_name=explanation.model_name,
                    received_at=explanation.received_at,
                    flags_recalibration=True,
                ))
        except LlmError as exc:
            log.warning("batched labeling call unavailable: %s", exc)
            for request in batch:
                self._publish(Explanation(
                    row_id=request.row_id,
                    text=f"unavailable: {exc.reason}",
                    model_name=self._client.model_name,
                    received_at=time.time(),
                    flags_recalibration=True,
                ))

    def _publish(self, explanation: Explanation) -> None:
        doc = {
            "row_id": explanation.row_id,
            "text": explanation.text,
            "model_name": explanation.model_name,
            "flags_recalibration": explanation.flags_recalibration,
        }
        self._session.publish(self._topics.output,
                              json.dumps(doc, sort_keys=True).encode())


def replace_instructions(request: ExplanationRequest, extra: str) -> ExplanationRequest:
    combined = (request.domain_instructions + "\n" + extra).strip()
    return ExplanationRequest(
        row_id=request.row_id, features=request.features,
        predicted=request.predicted, expected=request.expected,
        confidence=request.confidence, task_type=request.task_type,
        response_format=request.response_format, domain_instructions=combined,
    )


def run_genai_agent(session: BusSession, topics: TopicSet, config: GenAiConfig,
                    policy: DeviationPolicy, **kwargs) -> GenAiAgent:
    return GenAiAgent(session, topics, config, policy, **kwargs)
