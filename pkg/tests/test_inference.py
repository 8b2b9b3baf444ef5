import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeci.config import DeviationMode, DeviationPolicy
from edgeci.errors import (
    BindError,
    CorruptArtifact,
    DimensionMismatch,
    FormatVersionUnsupported,
    InsufficientData,
    NonFiniteInput,
)
from edgeci.inference import (
    ConfidenceTracker,
    InferenceAgent,
    ModelArtifact,
    ModelKind,
    Status,
    classify,
    deserialize_model,
    fit_linear_ridge,
    make_linear_model,
    make_mlp_model,
    mlp_loss_and_grad,
    predict,
    recalibrate_auto,
    serialize_model,
    serve_model_http,
)


def linear2(schema, w=(2.0, -1.0), b=0.5, version=1):
    return make_linear_model(w, b, schema, version=version)


def random_mlp(schema, d=2, h=3, seed=0, version=1):
    rng = np.random.default_rng(seed)
    return make_mlp_model(
        rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=h),
        float(rng.normal()), d, h, schema, version=version,
    )


class TestPredict:
    def test_linear_forward_is_dot_product(self, schema2):
        pred = predict(linear2(schema2), [3.0, 4.0])
        assert pred.predicted == pytest.approx(2 * 3 - 1 * 4 + 0.5)
        assert pred.model_version == 1

    def test_mlp_forward_matches_manual(self, schema2):
        model = random_mlp(schema2)
        x = np.array([0.3, -1.2])
        w1 = np.array(model.w1).reshape(2, 3)
        expected = np.tanh(x @ w1 + model.b1) @ np.array(model.w2) + model.b2
        assert predict(model, x).predicted == pytest.approx(float(expected))

    def test_dimension_mismatch(self, schema2):
        with pytest.raises(DimensionMismatch):
            predict(linear2(schema2), [1.0, 2.0, 3.0])

    def test_non_finite_rejected(self, schema2):
        with pytest.raises(NonFiniteInput):
            predict(linear2(schema2), [float("nan"), 1.0])

    def test_deterministic(self, schema2):
        model = random_mlp(schema2)
        assert predict(model, [1.0, 2.0]).predicted == \
            predict(model, [1.0, 2.0]).predicted


class TestClassify:
    def test_absolute_threshold_edges(self, abs_policy):
        assert classify(10.0, 11.4, abs_policy) is Status.OK
        assert classify(10.0, 11.5, abs_policy) is Status.OK  # boundary not exceeded
        assert classify(10.0, 11.6, abs_policy) is Status.NON_OK

    def test_percentage_mode(self, pct_policy):
        assert classify(96.0, 100.0, pct_policy) is Status.OK
        assert classify(94.0, 100.0, pct_policy) is Status.NON_OK

    def test_no_target_is_ok(self, abs_policy):
        assert classify(10.0, None, abs_policy) is Status.OK

    @given(
        predicted=st.floats(-1e6, 1e6),
        target=st.floats(-1e6, 1e6),
        threshold=st.floats(0.01, 100),
    )
    def test_absolute_matches_arithmetic_oracle(self, predicted, target, threshold):
        policy = DeviationPolicy(DeviationMode.ABSOLUTE, threshold)
        expected = Status.NON_OK if abs(predicted - target) > threshold else Status.OK
        assert classify(predicted, target, policy) is expected


class TestConfidence:
    def test_starts_at_one_for_zero_residual(self):
        assert ConfidenceTracker().confidence(0.0) == 1.0

    def test_bounded_and_monotone_in_residual(self):
        tracker = ConfidenceTracker()
        for err in [0.5, 0.2, 0.8, 0.1]:
            tracker.observe(err)
        values = [tracker.confidence(r) for r in [0.0, 0.5, 1.0, 5.0]]
        assert all(0.0 < v <= 1.0 for v in values)
        assert values == sorted(values, reverse=True)

    def test_matches_formula(self):
        tracker = ConfidenceTracker()
        errors = [0.5, 0.2, 0.8]
        for err in errors:
            tracker.observe(err)
        s = float(np.std(errors))
        assert tracker.confidence(0.3) == pytest.approx(math.exp(-0.3 / s))


def ridge_normal_equations(X, y, lam=1e-6):
    """Independent oracle: closed-form normal equations with the intercept
    left unpenalized."""
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    reg = lam * np.eye(d + 1)
    reg[d, d] = 0.0
    theta = np.linalg.solve(A.T @ A + reg, A.T @ y)
    return theta[:d], float(theta[d])


class TestRidge:
    def test_matches_normal_equations_fixed_seeds(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n, d = 30, int(rng.integers(1, 9))
            X = rng.normal(size=(n, d))
            y = rng.normal(size=n)
            w, b = fit_linear_ridge(X, y)
            w_ref, b_ref = ridge_normal_equations(X, y)
            assert np.max(np.abs(w - w_ref)) < 1e-6
            assert abs(b - b_ref) < 1e-6

    def test_recovers_exact_linear_data(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 3))
        y = X @ [1.5, -2.0, 0.25] + 0.7
        w, b = fit_linear_ridge(X, y)
        assert np.allclose(w, [1.5, -2.0, 0.25], atol=1e-5)
        assert b == pytest.approx(0.7, abs=1e-5)

    def test_collinear_columns_still_solve(self):
        # lam > 0 keeps the augmented system full rank even when X is not
        rng = np.random.default_rng(4)
        col = rng.normal(size=(20, 1))
        X = np.hstack([col, col])
        y = X[:, 0] * 2.0
        w, b = fit_linear_ridge(X, y)
        w_ref, b_ref = ridge_normal_equations(X, y)
        assert np.allclose(w, w_ref, atol=1e-5)
        assert b == pytest.approx(b_ref, abs=1e-5)


class TestMlpGradients:
    def finite_difference(self, model, X, y, eps=1e-6):
        def loss_at(params):
            d, h = model.d, model.h
            w1 = params[: d * h]
            b1 = params[d * h: d * h + h]
            w2 = params[d * h + h: d * h + 2 * h]
            b2 = params[-1]
            from dataclasses import replace

            m = replace(model, w1=tuple(w1), b1=tuple(b1), w2=tuple(w2),
                        b2=float(b2))
            return mlp_loss_and_grad(m, X, y)[0]

        params = np.array([*model.w1, *model.b1, *model.w2, model.b2])
        grad = np.empty_like(params)
        for i in range(len(params)):
            hi, lo = params.copy(), params.copy()
            hi[i] += eps
            lo[i] -= eps
            grad[i] = (loss_at(hi) - loss_at(lo)) / (2 * eps)
        return grad

    def test_backprop_matches_central_differences(self, schema2):
        rng = np.random.default_rng(11)
        model = random_mlp(schema2, d=2, h=4, seed=11)
        X = rng.normal(size=(12, 2))
        y = rng.normal(size=12)
        _, (g_w1, g_b1, g_w2, g_b2) = mlp_loss_and_grad(model, X, y)
        analytic = np.concatenate([g_w1.reshape(-1), g_b1, g_w2, [g_b2]])
        numeric = self.finite_difference(model, X, y)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-4

    def test_gradient_descent_reduces_loss(self, schema2):
        rng = np.random.default_rng(5)
        model = random_mlp(schema2, seed=5)
        X = rng.normal(size=(40, 2))
        y = np.tanh(X[:, 0]) - X[:, 1]
        before = mlp_loss_and_grad(model, X, y)[0]
        refit = recalibrate_auto(model, [(list(x), t) for x, t in zip(X, y)])
        after = mlp_loss_and_grad(refit, X, y)[0]
        assert after < before
        assert refit.version == model.version + 1


class TestRecalibrate:
    def test_linear_exact_recovery(self, schema2):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(20, 2))
        y = X @ [3.0, -1.0] + 2.0
        old = linear2(schema2, w=(0.0, 0.0), b=0.0)
        new = recalibrate_auto(old, [(list(x), t) for x, t in zip(X, y)])
        assert np.allclose(new.w, [3.0, -1.0], atol=1e-4)
        assert new.b == pytest.approx(2.0, abs=1e-4)
        assert new.version == 2
        assert old.w == (0.0, 0.0)  # original untouched

    def test_too_few_corrections(self, schema2):
        with pytest.raises(InsufficientData):
            recalibrate_auto(linear2(schema2), [([1.0, 2.0], 3.0)])

    def test_dimension_mismatch(self, schema2):
        with pytest.raises(DimensionMismatch):
            recalibrate_auto(linear2(schema2),
                             [([1.0, 2.0, 3.0], 1.0)] * 4)

    def test_non_finite_corrections(self, schema2):
        with pytest.raises(NonFiniteInput):
            recalibrate_auto(linear2(schema2),
                             [([1.0, float("inf")], 1.0)] * 4)


class TestArtifacts:
    def test_linear_round_trip_identity(self, schema2):
        artifact = ModelArtifact(linear2(schema2), {"mse": 0.1, "accuracy": 0.97},
                                 schema2)
        again = deserialize_model(serialize_model(artifact))
        assert again == artifact

    def test_mlp_round_trip_identity(self, schema2):
        artifact = ModelArtifact(random_mlp(schema2), {"mse": 0.5}, schema2)
        assert deserialize_model(serialize_model(artifact)) == artifact

    def test_serialization_is_deterministic(self, schema2):
        artifact = ModelArtifact(linear2(schema2), {"mse": 0.1}, schema2)
        assert serialize_model(artifact) == serialize_model(artifact)

    def test_unsupported_format_version(self, schema2):
        doc = json.loads(serialize_model(
            ModelArtifact(linear2(schema2), {}, schema2)))
        doc["format_version"] = 99
        with pytest.raises(FormatVersionUnsupported):
            deserialize_model(json.dumps(doc).encode())

    def test_corrupt_json(self):
        with pytest.raises(CorruptArtifact):
            deserialize_model(b"{not json")

    def test_weight_length_disagreement(self, schema2):
        doc = json.loads(serialize_model(
            ModelArtifact(linear2(schema2), {}, schema2)))
        doc["weights"]["w"] = [1.0]
        with pytest.raises(CorruptArtifact):
            deserialize_model(json.dumps(doc).encode())

    def test_missing_key(self):
        with pytest.raises(CorruptArtifact):
            deserialize_model(b'{"format_version": 1, "kind": "linear"}')


def publish_json(bus, topic, doc):
    bus.publish(topic, json.dumps(doc).encode())


@pytest.fixture
def agent_env(bus, topics, schema2, abs_policy):
    model = make_linear_model((2.0, -1.0), 0.5, schema2)
    results, acks = [], []
    bus.subscribe(topics.output,
                  lambda env: results.append(json.loads(env.payload)))
    bus.subscribe(topics.command,
                  lambda env: acks.append(json.loads(env.payload))
                  if b'"ack"' in env.payload else None)
    agent = InferenceAgent(bus, model, topics, abs_policy, schema2)
    yield bus, topics, agent, results, acks
    agent.stop()


class TestInferenceAgent:
    def test_observation_produces_result_message(self, agent_env):
        bus, topics, agent, results, _ = agent_env
        publish_json(bus, topics.input,
                     {"ts": 1.0, "features": {"temperature": 3.0, "ph": 4.0}})
        assert len(results) == 1
        doc = results[0]
        assert doc["row_id"] == 1
        assert doc["prediction"]["predicted"] == pytest.approx(2.5)
        assert doc["prediction"]["model_version"] == 1
        assert doc["status"] == "OK"  # no target
        assert doc["observation"]["features"]["ph"] == 4.0

    def test_row_ids_increment(self, agent_env):
        bus, topics, _, results, _ = agent_env
        for _ in range(3):
            publish_json(bus, topics.input,
                         {"temperature": 1.0, "ph": 1.0})
        assert [r["row_id"] for r in results] == [1, 2, 3]

    def test_status_from_deviation_policy(self, agent_env):
        bus, topics, _, results, _ = agent_env
        # predicted = 2*1 - 1 + 0.5 = 1.5; threshold 1.5 absolute
        publish_json(bus, topics.input,
                     {"temperature": 1.0, "ph": 1.0, "viscosity": 2.0})
        publish_json(bus, topics.input,
                     {"temperature": 1.0, "ph": 1.0, "viscosity": 5.0})
        assert results[0]["status"] == "OK"
        assert results[1]["status"] == "NonOK"

    def test_malformed_observation_dropped(self, agent_env):
        bus, topics, _, results, _ = agent_env
        bus.publish(topics.input, b"not json")
        publish_json(bus, topics.input, {"temperature": 1.0})  # missing ph
        publish_json(bus, topics.input, {"temperature": 1.0, "ph": 99.0})  # bounds
        assert results == []

    def test_recalibrate_command_updates_model_and_acks(self, agent_env):
        bus, topics, agent, _, acks = agent_env
        rng = np.random.default_rng(2)
        X = rng.normal(size=(10, 2))
        y = X @ [1.0, 1.0] + 0.0
        corrections = [
            {"features": {"temperature": float(a), "ph": float(b)},
             "target": float(t)}
            for (a, b), t in zip(X, y)
        ]
        publish_json(bus, topics.command,
                     {"cmd": "recalibrate", "corrections": corrections})
        assert acks[-1] == {"ack": "recalibrate", "ok": True, "model_version": 2}
        assert agent.model.version == 2
        assert np.allclose(agent.model.w, [1.0, 1.0], atol=1e-4)

    def test_recalibrate_with_too_few_corrections_nacks(self, agent_env):
        bus, topics, agent, _, acks = agent_env
        publish_json(bus, topics.command, {"cmd": "recalibrate", "corrections": []})
        assert acks[-1]["ok"] is False
        assert agent.model.version == 1

    def test_swap_command(self, agent_env, schema2):
        bus, topics, agent, _, acks = agent_env
        incoming = ModelArtifact(
            make_linear_model((9.0, 9.0), 9.0, schema2, version=7),
            {"mse": 0.0}, schema2)
        publish_json(bus, topics.command,
                     {"cmd": "swap",
                      "artifact": json.loads(serialize_model(incoming))})
        assert acks[-1] == {"ack": "swap", "ok": True, "model_version": 7}
        assert agent.model.w == (9.0, 9.0)

    def test_swap_schema_hash_mismatch_rejected(self, agent_env, schema4):
        bus, topics, agent, _, acks = agent_env
        foreign = ModelArtifact(
            make_linear_model((1.0,) * 4, 0.0, schema4), {}, schema4)
        publish_json(bus, topics.command,
                     {"cmd": "swap",
                      "artifact": json.loads(serialize_model(foreign))})
        assert acks[-1]["ok"] is False
        assert acks[-1]["error"] == "SchemaHashMismatch"
        assert agent.model.w == (2.0, -1.0)

    def test_rollback_restores_previous_weights(self, agent_env, schema2):
        bus, topics, agent, _, acks = agent_env
        incoming = ModelArtifact(
            make_linear_model((9.0, 9.0), 9.0, schema2, version=5), {}, schema2)
        publish_json(bus, topics.command,
                     {"cmd": "swap",
                      "artifact": json.loads(serialize_model(incoming))})
        publish_json(bus, topics.command, {"cmd": "rollback"})
        assert acks[-1]["ok"] is True
        assert agent.model.w == (2.0, -1.0)  # original weights back
        assert agent.model.version == 6  # version always moves forward

    def test_rollback_with_empty_history_nacks(self, agent_env):
        bus, topics, _, _, acks = agent_env
        publish_json(bus, topics.command, {"cmd": "rollback"})
        assert acks[-1] == {"ack": "rollback", "ok": False,
                            "error": "VersionNotRetained"}

    def test_ack_chatter_is_ignored(self, agent_env):
        bus, topics, agent, _, _ = agent_env
        publish_json(bus, topics.command, {"ack": "swap", "ok": True})
        assert agent.model.version == 1


class TestModelServer:
    def test_predict_and_health(self, schema2):
        server = serve_model_http(linear2(schema2), schema2, "127.0.0.1:0")
        try:
            base = f"http://127.0.0.1:{server.port}"
            r = httpx.post(f"{base}/predict",
                           json={"features": {"temperature": 3.0, "ph": 4.0}})
            assert r.status_code == 200
            assert r.json() == {"predicted": pytest.approx(2.5),
                                "confidence": 1.0, "model_version": 1}
            health = httpx.get(f"{base}/health").json()
            assert health == {"status": "ok", "model_version": 1}
        finally:
            server.close()

    def test_bad_request_gets_400(self, schema2):
        server = serve_model_http(linear2(schema2), schema2, "127.0.0.1:0")
        try:
            base = f"http://127.0.0.1:{server.port}"
            assert httpx.post(f"{base}/predict",
                              json={"features": {"temperature": 1.0}}
                              ).status_code == 400
            assert httpx.post(f"{base}/predict", content=b"junk").status_code == 400
            assert httpx.get(f"{base}/nope").status_code == 404
        finally:
            server.close()

    def test_serves_live_model_after_swap(self, agent_env, schema2):
        bus, topics, agent, _, _ = agent_env
        server = serve_model_http(agent, schema2, "127.0.0.1:0")
        try:
            incoming = ModelArtifact(
                make_linear_model((0.0, 0.0), 42.0, schema2, version=3),
                {}, schema2)
            publish_json(bus, topics.command,
                         {"cmd": "swap",
                          "artifact": json.loads(serialize_model(incoming))})
            r = httpx.post(
                f"http://127.0.0.1:{server.port}/predict",
                json={"features": {"temperature": 1.0, "ph": 1.0}})
            assert r.json()["predicted"] == 42.0
            assert r.json()["model_version"] == 3
        finally:
            server.close()

    def test_bind_error(self, schema2):
        with pytest.raises(BindError):
            serve_model_http(linear2(schema2), schema2, "256.0.0.1:99999")


def test_model_kind_wire_values():
    assert ModelKind.LINEAR.value == "linear"
    assert ModelKind.MLP1H.value == "mlp1h"


def test_model_is_immutable(schema2):
    model = linear2(schema2)
    with pytest.raises(Exception):
        model.w = (0.0, 0.0)
