"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 config/input error,
3 connectivity, 64 usage. Subcommand results go to stdout as JSON;
human-readable logs go to stderr.
"""
from __future__ import annotations

import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import click

from . import bus as busmod
from . import config as configmod
from . import designer, gateway, genai, inference, ingest
from .errors import ConfigError, EdgeCiError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_CONNECTIVITY = 3
EXIT_USAGE = 64

SAMPLE_CONFIG = {
    "broker_host": "localhost",
    "broker_port": 1883,
    "client_id": "edgeci",
    "topic_prefix": "plant1",
    "input_topic": "inputTopic",
    "output_topic": "outputTopic",
    "command_topic": "commandTopic",
    "gateway_bind": "127.0.0.1:8080",
    "replay_rate_hz": 10.0,
    "deviation_policy": {"mode": "absolute", "threshold": 1.5},
    "features": [
        {"name": "fat_content", "unit": "%fat", "required": True, "min": 0, "max": 100},
        {"name": "ph", "unit": "pH", "required": True, "min": 0, "max": 14},
        {"name": "pressure", "unit": "bar", "required": True, "min": 0, "max": 50},
        {"name": "temperature", "unit": "°C", "required": True, "min": -20, "max": 150},
    ],
    "target_name": "viscosity",
    "genai": {
        "endpoint_url": "http://127.0.0.1:9741/v1/chat/completions",
        "api_key_env_var": "EDGECI_LLM_API_KEY",
        "template_dir": "templates",
        "request_timeout_ms": 5000,
        "few_shot_k": 0,
        "batch_size": 1,
    },
}

SAMPLE_PIPELINE = {
    "name": "train-and-deploy",
    "trigger": {"kind": "manual"},
    "target": {"mode": "file", "path": "model.json"},
    "stages": [
        {"kind": "drop_missing", "input_ref": "input", "output_name": "clean"},
        {"kind": "train_linear", "input_ref": "clean", "output_name": "model",
         "params": {"ridge_lambda": 1e-6}},
        {"kind": "evaluate", "input_ref": "clean", "output_name": "evaluated",
         "params": {"holdout_fraction": 0.2,
                    "policy": {"mode": "absolute", "threshold": 1.5}}},
        {"kind": "deploy", "input_ref": "model", "output_name": "deployed"},
    ],
}


def _emit(doc: dict) -> None:
    click.echo(json.dumps(doc, sort_keys=True))


def _load_config_or_exit(path: str) -> configmod.DeploymentConfig:
    try:
        return configmod.load_config(path)
    except (FileNotFoundError, OSError, ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _make_session(config: configmod.DeploymentConfig, loopback: bool,
                  max_retries: int | None = None) -> busmod.BusSession:
    if loopback:
        return busmod.make_inmemory_bus()
    session = busmod.connect(config.broker_host, config.broker_port, config.client_id)
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline:
        state = session.state
        if state.status is busmod.Status.CONNECTED:
            return session
        if max_retries is not None and state.retry_count > max_retries:
            break
        time.sleep(0.05)
    session.close()
    click.echo(
        f"broker {config.broker_host}:{config.broker_port} unreachable", err=True
    )
    sys.exit(EXIT_CONNECTIVITY)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging on stderr")
def cli(verbose: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@cli.command("init")
@click.argument("path", type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="overwrite existing files")
def cmd_init(path: str, force: bool) -> None:
    """Write a sample config, prompt templates, and pipeline into PATH."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    config_path = root / "config.json"
    pipeline_path = root / "pipeline.json"
    template_path = root / "templates" / "explain_prediction.txt"
    for p in (config_path, pipeline_path, template_path):
        if p.exists() and not force:
            click.echo(f"PathExists: {p} (use --force to overwrite)", err=True)
            sys.exit(EXIT_CONFIG)
    config_path.write_text(json.dumps(SAMPLE_CONFIG, indent=2) + "\n", encoding="utf-8")
    pipeline_path.write_text(json.dumps(SAMPLE_PIPELINE, indent=2) + "\n",
                             encoding="utf-8")
    template_path.parent.mkdir(exist_ok=True)
    template_path.write_text(genai.DEFAULT_TEMPLATE_BODY + "\n", encoding="utf-8")
    configmod.load_config(config_path)  # sample must accept itself
    _emit({"created": [str(config_path), str(pipeline_path), str(template_path)]})


@cli.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--components", default="all",
              help="comma list of inference,genai,gateway or 'all'")
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="model artifact JSON for the inference agent")
@click.option("--loopback", is_flag=True, help="in-memory bus instead of MQTT")
@click.option("--max-retries", type=int, default=None)
def cmd_run(config_path: str, components: str, model_path: str | None,
            loopback: bool, max_retries: int | None) -> None:
    """Run selected agents until interrupted."""
    wanted = ({"inference", "genai", "gateway"} if components == "all"
              else {c.strip() for c in components.split(",") if c.strip()})
    unknown = wanted - {"inference", "genai", "gateway"}
    if unknown:
        raise click.UsageError(f"unknown components: {sorted(unknown)}")
    config = _load_config_or_exit(config_path)
    session = _make_session(config, loopback, max_retries)
    topics = configmod.derive_topics(config)
    schema = config.feature_schema
    running = []
    server = None
    try:
        if "inference" in wanted:
            if model_path:
                artifact = inference.deserialize_model(Path(model_path).read_bytes())
                model = artifact.model
            else:
                model = inference.make_linear_model(
                    [0.0] * len(schema.features), 0.0, schema
                )
            running.append(inference.run_inference_agent(
                session, model, topics, config.deviation_policy, schema))
            log.info("inference agent up (model v%d)", model.version)
        if "genai" in wanted:
            running.append(genai.run_genai_agent(
                session, topics, config.genai, config.deviation_policy))
            log.info("genai agent up")
        if "gateway" in wanted:
            store = gateway.RowStore(config.deviation_policy)
            agent = gateway.GatewayAgent(session, topics, store)
            running.append(agent)
            app = gateway.create_app(store, schema, agent,
                                     static_dir=_frontend_dir())
            server, _ = gateway.serve_gateway(app, config.gateway_bind)
            log.info("gateway up at http://%s", config.gateway_bind)
        stop = threading.Event()
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        _emit({"running": sorted(wanted), "state": session.state.status.value})
        try:
            while not stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
    finally:
        for agent in running:
            agent.stop()
        if server is not None:
            server.should_exit = True
        session.close()


def _frontend_dir() -> str | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if candidate.is_dir():
        return str(candidate)
    candidate = Path.cwd() / "frontend" / "dist"
    return str(candidate) if candidate.is_dir() else None


@cli.command("replay")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--rate", type=float, default=None, help="override replay_rate_hz")
@click.option("--loopback", is_flag=True)
def cmd_replay(config_path: str, csv_path: str, rate: float | None,
               loopback: bool) -> None:
    """Replay a CSV file onto the input topic; prints a ReplayReport."""
    config = _load_config_or_exit(config_path)
    if not Path(csv_path).exists():
        click.echo(f"no such file: {csv_path}", err=True)
        sys.exit(EXIT_CONFIG)
    session = _make_session(config, loopback)
    topics = configmod.derive_topics(config)
    try:
        spec = ingest.ReplaySpec(csv_path, rate or config.replay_rate_hz)
        report = ingest.replay_csv(spec, config.feature_schema, session, topics.input)
    except EdgeCiError as exc:
        click.echo(f"replay error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    finally:
        session.close()
    _emit(report.to_dict())


@cli.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--rate", type=float, default=None)
@click.option("--drift", type=float, default=0.0, help="per-step drift on every feature")
@click.option("--noise", type=float, default=0.1)
@click.option("--loopback", is_flag=True)
def cmd_simulate(config_path: str, steps: int, seed: int, rate: float | None,
                 drift: float, noise: float, loopback: bool) -> None:
    """Stream simulated sensor observations onto the input topic."""
    config = _load_config_or_exit(config_path)
    schema = config.feature_schema
    d = len(schema.features)
    spec = ingest.SensorSimSpec(
        generators=tuple(
            ingest.FeatureGen(base=float(10 + 5 * i), noise_stddev=noise,
                              drift_per_step=drift)
            for i in range(d)
        ),
        true_weights=tuple(1.0 for _ in range(d)),
        true_bias=0.0,
        target_noise_stddev=noise,
        seed=seed,
    )
    session = _make_session(config, loopback)
    topics = configmod.derive_topics(config)
    try:
        sent = ingest.stream_sensor(spec, schema, session, topics.input, steps,
                                    rate_hz=rate, clock=lambda: 0.0)
    finally:
        session.close()
    _emit({"steps_sent": sent, "seed": seed})


@cli.command("pipeline")
@click.argument("action", type=click.Choice(["validate", "run", "deploy"]))
@click.argument("spec_path", type=click.Path())
@click.option("--data", "data_path", type=click.Path(exists=True),
              help="CSV dataset for run (schema order + target column)")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="deployment config (schema for --data, bus for deploy)")
@click.option("--seed", type=int, default=0)
@click.option("--loopback", is_flag=True)
def cmd_pipeline(action: str, spec_path: str, data_path: str | None,
                 config_path: str | None, seed: int, loopback: bool) -> None:
    """Validate, execute, or deploy a declarative pipeline."""
    if not Path(spec_path).exists():
        click.echo(f"no such file: {spec_path}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        spec = designer.pipeline_from_dict(
            json.loads(Path(spec_path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        click.echo(f"bad pipeline spec: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    report = designer.validate_pipeline(spec)
    if action == "validate":
        _emit({"valid": report.valid, "errors": list(report.errors)})
        sys.exit(EXIT_OK if report.valid else EXIT_VALIDATION)
    if not report.valid:
        _emit({"valid": False, "errors": list(report.errors)})
        sys.exit(EXIT_VALIDATION)

    config = _load_config_or_exit(config_path) if config_path else None
    schema = config.feature_schema if config else None
    dataset = _load_dataset(data_path, schema) if data_path else []

    session = None
    topics = None
    needs_bus = spec.target.mode == "local_agent" and any(
        s.kind == "deploy" for s in spec.stages
    )
    if action == "deploy" or needs_bus:
        if config is None:
            click.echo("deploy requires --config", err=True)
            sys.exit(EXIT_CONFIG)
        session = _make_session(config, loopback)
        topics = configmod.derive_topics(config)
    try:
        result = designer.run_pipeline(spec, dataset, schema=schema, seed=seed,
                                       session=session, topics=topics)
    except designer.StageFailure as exc:
        code = EXIT_CONNECTIVITY if isinstance(
            exc.cause, (designer.DeployTimeout, designer.TargetUnreachable)
        ) else EXIT_VALIDATION
        _emit({"ok": False, "stage": exc.stage, "error": str(exc.cause)})
        sys.exit(code)
    finally:
        if session is not None:
            session.close()
    _emit({"ok": True, "metrics": result.metrics, "exports": result.exports,
           "model_version": None if result.artifact is None
           else result.artifact.model.version})


def _load_dataset(path: str, schema) -> designer.Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    if schema is None:
        header = [c.strip() for c in lines[0].split(",")]
        names, target_name = header[:-1], header[-1]
    else:
        names, target_name = schema.feature_names, schema.target_name
        header = [c.strip() for c in lines[0].split(",")]
    dataset: designer.Dataset = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = dict(zip(header, (c.strip() for c in line.split(","))))
        try:
            x = [float(cells[n]) for n in names]
            t_raw = cells.get(target_name, "")
            t = float(t_raw) if t_raw else None
        except (KeyError, ValueError):
            continue
        dataset.append((x, t))
    return dataset


@cli.command("export")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_export(config_path: str, out_path: str) -> None:
    """Download all Non-OK rows from a running gateway into a JSON file."""
    import httpx

    config = _load_config_or_exit(config_path)
    url = f"http://{config.gateway_bind}/api/export/nonok"
    try:
        response = httpx.get(url, timeout=10)
        response.raise_for_status()
    except httpx.HTTPError as exc:
        click.echo(f"gateway unreachable: {exc}", err=True)
        sys.exit(EXIT_CONNECTIVITY)
    Path(out_path).write_bytes(response.content)
    _emit({"written": out_path, "rows": len(response.json())})


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(130)


if __name__ == "__main__":
    main()
