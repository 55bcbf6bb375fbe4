import json

import pytest
from fastapi.testclient import TestClient

from app.api.routes import jobs as jobs_routes
from app.main import app
from app.schemas.configs import DataSource
from tests.conftest import make_synth_spec, make_train_config


@pytest.fixture
def client():
    jobs_routes.jobs.clear()
    with TestClient(app) as c:
        yield c
    jobs_routes.jobs.clear()


def _train_payload(tmp_path, **overrides) -> dict:
    cfg = make_train_config(tmp_path / "unused", steps=1, **overrides).model_copy(update={"out_dir": None})
    return json.loads(cfg.model_dump_json())


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_unknown_job_is_404(client):
    assert client.get("/jobs/missing/status").status_code == 404
    assert client.get("/jobs/missing/result").status_code == 404


def test_invalid_train_request_is_422(client):
    assert client.post("/jobs/train", json={"steps": 3}).status_code == 422


def test_train_job_runs_and_serves_checkpoint(client, tmp_path, output_root):
    response = client.post("/jobs/train", json=_train_payload(tmp_path))
    assert response.status_code == 200
    job = response.json()
    assert job["kind"] == "train"
    assert job["status"] == "queued"

    status = client.get(f"/jobs/{job['job_id']}/status").json()
    assert status["status"] == "completed", status["error"]
    assert status["output_path"].startswith(str(output_root))

    result = client.get(f"/jobs/{job['job_id']}/result")
    assert result.status_code == 200
    assert result.content[:8] == b"THRMDIFF"


def test_evaluate_job_after_training(client, tmp_path):
    job = client.post("/jobs/train", json=_train_payload(tmp_path)).json()
    ckpt = client.get(f"/jobs/{job['job_id']}/status").json()["output_path"]

    request = {
        "ckpt": ckpt,
        "data": json.loads(DataSource(synth=make_synth_spec(), n=2, offset=100).model_dump_json()),
        "seed": 1,
    }
    eval_job = client.post("/jobs/evaluate", json=request).json()
    status = client.get(f"/jobs/{eval_job['job_id']}/status").json()
    assert status["status"] == "completed", status["error"]
    report = client.get(f"/jobs/{eval_job['job_id']}/result").json()
    assert report["n_images"] == 2


def test_failed_job_reports_error(client, tmp_path):
    request = {
        "ckpt": str(tmp_path / "absent.ckpt"),
        "data": json.loads(DataSource(synth=make_synth_spec(), n=2).model_dump_json()),
    }
    job = client.post("/jobs/evaluate", json=request).json()
    status = client.get(f"/jobs/{job['job_id']}/status").json()
    assert status["status"] == "failed"
    assert "DataError" in status["error"]
    assert client.get(f"/jobs/{job['job_id']}/result").status_code == 400
