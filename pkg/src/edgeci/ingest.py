"""Observation producers: paced CSV replay and a synthetic sensor simulator.

The simulator's ground truth is linear-plus-noise (target = w·x + b + ε)
so downstream accuracy checks always have an analytic oracle. Invalid
CSV rows are skipped and logged, never abort the replay.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bus import BusSession
from .config import FeatureSchema, Observation, validate_observation_against_schema
from .errors import (
    ColumnCountMismatch,
    HeaderMismatch,
    NonNumericValue,
    SchemaError,
    SpecMismatch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplaySpec:
    csv_path: str
    rate_hz: float
    loop_forever: bool = False

    def __post_init__(self) -> None:
        if not self.rate_hz > 0:
            raise SpecMismatch("rate_hz must be > 0")


@dataclass(frozen=True)
class ReplayReport:
    rows_sent: int
    rows_rejected: int
    duration_s: float

    def to_dict(self) -> dict:
        return {
            "rows_sent": self.rows_sent,
            "rows_rejected": self.rows_rejected,
            "duration_s": self.duration_s,
        }


@dataclass(frozen=True)
class FeatureGen:
    base: float
    noise_stddev: float = 0.0
    drift_per_step: float = 0.0

    def __post_init__(self) -> None:
        if self.noise_stddev < 0:
            raise SpecMismatch("noise_stddev must be >= 0")


@dataclass(frozen=True)
class AnomalySpec:
    probability: float = 0.0
    magnitude_stddev_multiplier: float = 5.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise SpecMismatch("anomaly probability must be in [0, 1]")
        if not self.magnitude_stddev_multiplier > 0:
            raise SpecMismatch("magnitude_stddev_multiplier must be > 0")


@dataclass(frozen=True)
class SensorSimSpec:
    generators: tuple[FeatureGen, ...]
    true_weights: tuple[float, ...]
    true_bias: float = 0.0
    target_noise_stddev: float = 0.0
    anomaly: AnomalySpec = field(default_factory=AnomalySpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.true_weights) != len(self.generators):
            raise SpecMismatch("true_weights length must equal generator count")
        if self.target_noise_stddev < 0:
            raise SpecMismatch("target_noise_stddev must be >= 0")


# --------------------------------------------------------------------------
# CSV replay
# --------------------------------------------------------------------------

def parse_csv_row(line: str, schema: FeatureSchema,
                  columns: list[str] | None = None) -> Observation:
    """Parse one data row. `columns` gives the file's column order; when
    omitted, columns are the schema features (optionally plus a trailing
    target column)."""
    values = [v.strip() for v in line.rstrip("\r\n").split(",")]
    names = columns if columns is not None else schema.feature_names
    if columns is None and len(values) == len(names) + 1:
        names = names + [schema.target_name]
    if len(values) != len(names):
        raise ColumnCountMismatch(
            f"row has {len(values)} columns, expected {len(names)}"
        )
    payload: dict[str, float] = {}
    for name, raw in zip(names, values):
        if raw == "":
            continue  # empty cell = absent value
        try:
            payload[name] = float(raw)
        except ValueError:
            raise NonNumericValue(name, raw) from None
    return validate_observation_against_schema(payload, schema)


def _map_header(header_line: str, schema: FeatureSchema) -> list[str]:
    columns = [c.strip() for c in header_line.rstrip("\r\n").split(",")]
    known = set(schema.feature_names) | {schema.target_name}
    unknown = [c for c in columns if c not in known]
    if unknown:
        raise HeaderMismatch(f"unknown columns: {unknown}")
    missing = [f.name for f in schema.features if f.required and f.name not in columns]
    if missing:
        raise HeaderMismatch(f"missing required columns: {missing}")
    if len(set(columns)) != len(columns):
        raise HeaderMismatch("duplicate columns in header")
    return columns


def replay_csv(spec: ReplaySpec, schema: FeatureSchema, session: BusSession,
               topic: str, stop: threading.Event | None = None) -> ReplayReport:
    """Publish one Observation per valid CSV data row at `spec.rate_hz`.

    Rows failing parsing or schema validation are counted, logged, and
    skipped. Pacing is drift-free: row i is sent at start + i/rate.
    """
    path = Path(spec.csv_path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise HeaderMismatch("empty file: no header row")
    columns = _map_header(lines[0], schema)
    data_lines = [l for l in lines[1:] if l.strip()]

    sent = rejected = 0
    interval = 1.0 / spec.rate_hz
    start = time.monotonic()
    i = 0
    while True:
        for line in data_lines:
            if stop is not None and stop.is_set():
                break
            due = start + i * interval
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            i += 1
            try:
                obs = parse_csv_row(line, schema, columns)
            except (SchemaError, ColumnCountMismatch, NonNumericValue) as exc:
                rejected += 1
                log.warning("rejected CSV row %d: %s", i, exc)
                continue
            obs = Observation(ts=time.time(), features=obs.features, target=obs.target)
            session.publish(topic, json.dumps(obs.to_payload(), sort_keys=True).encode())
            sent += 1
        if not spec.loop_forever or (stop is not None and stop.is_set()):
            break
    return ReplayReport(sent, rejected, time.monotonic() - start)


# --------------------------------------------------------------------------
# Sensor simulator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimStep:
    step: int
    features: tuple[float, ...]
    target: float
    anomalous: bool


def simulate_steps(spec: SensorSimSpec, schema: FeatureSchema, n_steps: int,
                   start_step: int = 0) -> list[SimStep]:
    """Deterministic generator run; the anomaly flag is exposed for tests
    and oracle labeling, it is never published."""
    if len(spec.generators) != len(schema.features):
        raise SpecMismatch(
            f"spec has {len(spec.generators)} generators, schema has "
            f"{len(schema.features)} features"
        )
    rng = np.random.default_rng(spec.seed)
    # burn the RNG forward so a start_step offset continues the same stream
    d = len(spec.generators)
    if start_step:
        rng.random(start_step)
        rng.normal(size=start_step * (d + 1))
    weights = np.asarray(spec.true_weights, dtype=float)
    steps: list[SimStep] = []
    for t in range(start_step, start_step + n_steps):
        anomalous = bool(rng.random() < spec.anomaly.probability)
        scale = spec.anomaly.magnitude_stddev_multiplier if anomalous else 1.0
        x = np.empty(d)
        for i, gen in enumerate(spec.generators):
            noise = rng.normal(0.0, 1.0) * gen.noise_stddev * scale
            x[i] = gen.base + gen.drift_per_step * t + noise
        target = float(weights @ x + spec.true_bias
                       + rng.normal(0.0, 1.0) * spec.target_noise_stddev)
        steps.append(SimStep(t, tuple(float(v) for v in x), target, anomalous))
    return steps


def stream_sensor(spec: SensorSimSpec, schema: FeatureSchema, session: BusSession,
                  topic: str, n_steps: int, rate_hz: float | None = None,
                  stop: threading.Event | None = None, clock=time.time) -> int:
    """Emit `n_steps` simulated Observations; returns the count published.

    With `rate_hz` unset, emission is as fast as the bus accepts.
    Feature/target content is byte-identical for identical (spec, n_steps);
    the `ts` stamp comes from `clock`, so pin it for full byte identity.
    """
    names = schema.feature_names
    interval = None if rate_hz is None else 1.0 / rate_hz
    start = time.monotonic()
    published = 0
    for step in simulate_steps(spec, schema, n_steps):
        if stop is not None and stop.is_set():
            break
        if interval is not None:
            delay = start + published * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        obs = Observation(
            ts=clock(),
            features=dict(zip(names, step.features)),
            target=step.target,
        )
        session.publish(topic, json.dumps(obs.to_payload(), sort_keys=True).encode())
        published += 1
    return published


def generate_training_data(spec: SensorSimSpec, schema: FeatureSchema,
                           n: int) -> list[tuple[list[float], float]]:
    """n labeled (features, target) pairs from the generator; not published."""
    if n < 1:
        raise SpecMismatch("n must be >= 1")
    return [(list(s.features), s.target) for s in simulate_steps(spec, schema, n)]
