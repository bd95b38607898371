import numpy as np
import pytest
from fastapi.testclient import TestClient

import inference_api
from mlp_networks import init_theta, save_checkpoint
from scene_graph import TaskConfig, instance_record, synth_dataset

TASK = TaskConfig(d=4, v_o=3, v_p=2, m_range=(2, 3), n_range=(1, 2), seed=11)


@pytest.fixture
def client(monkeypatch):
    monkeypatch.delenv(inference_api.CHECKPOINT_ENV, raising=False)
    monkeypatch.delenv("IWSL_DATABASE_URL", raising=False)
    monkeypatch.delenv("DATABASE_URL", raising=False)
    inference_api._model_cache.clear()
    return TestClient(inference_api.app)


@pytest.fixture
def checkpoint(tmp_path, monkeypatch):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, init_theta(TASK.d, TASK.v_o, TASK.v_p, hidden_sizes=(5,), seed=0), 0.6)
    monkeypatch.setenv(inference_api.CHECKPOINT_ENV, str(path))
    return path


def test_health_without_checkpoint(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["service"] == "iwsl-inference-api"
    assert body["version"] == "1.0.0"
    assert body["checkpoint_loaded"] is False
    assert body["database"]["status"] == "disabled"


def test_health_reports_loaded_checkpoint(client, checkpoint):
    assert client.get("/health").json()["checkpoint_loaded"] is True


def test_infer_node_dominant_score(client):
    response = client.post("/infer-node", json={"psi": [10.0, 0.0], "seed": 3})
    assert response.status_code == 200
    body = response.json()
    assert sum(body["pi_star"]) == pytest.approx(1.0, abs=1e-9)
    assert body["pi_star"][0] >= 0.95
    assert body["posterior_label"] == 0
    assert body["variational_label"] == 0
    assert np.exp(body["log_posterior"]).sum() == pytest.approx(1.0, abs=1e-9)


def test_infer_node_single_class(client):
    body = client.post("/infer-node", json={"psi": [3.0]}).json()
    assert body["pi_star"] == [1.0]
    assert body["bound"] == pytest.approx(3.0)


def test_infer_node_is_seeded(client):
    request = {"psi": [0.2, -0.4, 0.9], "samples_infer": 10, "seed": 5}
    assert client.post("/infer-node", json=request).json() == client.post("/infer-node", json=request).json()


@pytest.mark.parametrize("payload", [{"psi": []}, {"psi": [1.0, 0.0], "tau": 0.0},
                                     {"psi": [1.0, 0.0], "samples_infer": 0},
                                     {"psi": [1.0, 0.0], "density": "uniform"}])
def test_infer_node_rejects_invalid_requests(client, payload):
    assert client.post("/infer-node", json=payload).status_code == 422


def test_predict_requires_checkpoint(client):
    inst = synth_dataset(TASK, 1)[0]
    response = client.post("/predict", json={"instance": instance_record(inst)})
    assert response.status_code == 503


def test_predict_labels_every_node(client, checkpoint):
    inst = synth_dataset(TASK, 1)[0]
    response = client.post("/predict", json={"instance": instance_record(inst), "samples_infer": 10})
    assert response.status_code == 200
    body = response.json()
    assert body["tau"] == pytest.approx(0.6)
    assert len(body["bounds"]) == inst.graph.m + inst.graph.n
    for mode in ("posterior", "variational"):
        assert len(body["object_labels"][mode]) == inst.graph.m
        assert len(body["predicate_labels"][mode]) == inst.graph.n
        assert all(0 <= label < TASK.v_o for label in body["object_labels"][mode])
        assert all(0 <= label < TASK.v_p for label in body["predicate_labels"][mode])


def test_predict_rejects_bad_instance(client, checkpoint):
    assert client.post("/predict", json={"instance": {"graph": {"m": 1}}}).status_code == 422


def test_predict_rejects_mismatched_features(client, checkpoint):
    wide = TaskConfig(d=6, v_o=3, v_p=2, m_range=(2, 2), n_range=(1, 1), seed=1)
    record = instance_record(synth_dataset(wide, 1)[0])
    assert client.post("/predict", json={"instance": record}).status_code == 422
