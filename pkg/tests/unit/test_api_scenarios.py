from unittest.mock import patch

import pytest
from fastapi.testclient import TestClient

from app.api.schemas import ScenarioConfig
from app.core.exceptions import ConfigError
from app.main import app
from app.services.run_registry import RunRegistry

SMALL_BODY = {
    "scenario": {"name": "api", "mode": ["sync"], "omega": [1.0]},
    "geometry": {"grid": [1, 1, 2], "coarse_elems": 1, "fine_elems": 2},
    "output": {"write": False},
}


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert "Global/Local Coupling Bench API" in response.json()["message"]


def test_submit_then_fetch(client):
    response = client.post("/api/scenarios", json=SMALL_BODY)
    assert response.status_code == 202
    run_id = response.json()["run_id"]

    # background tasks run before TestClient returns
    result = client.get(f"/api/scenarios/{run_id}")
    assert result.status_code == 200
    body = result.json()
    assert body["status"] == "done"
    assert len(body["rows"]) == 1
    assert body["rows"][0]["mode"] == "sync"
    assert body["rows"][0]["converged"] is True


def test_unknown_run_is_404(client):
    response = client.get("/api/scenarios/does-not-exist")
    assert response.status_code == 404
    assert "not found" in response.json()["detail"]


def test_invalid_body_is_rejected(client):
    body = dict(SMALL_BODY, material={"nu": 0.5})
    assert client.post("/api/scenarios", json=body).status_code == 422
    assert client.post("/api/scenarios", json={"turbo": {}}).status_code == 422


def test_registry_stores_failures():
    registry = RunRegistry()
    entry = registry.submit(ScenarioConfig())
    assert entry.status == "queued"
    with patch("app.services.run_registry.run_scenario", side_effect=ConfigError("workers too high", key="workers")):
        registry.execute(entry.run_id)
    assert registry.get(entry.run_id).status == "failed"
    assert registry.get(entry.run_id).error == "workers too high"


def test_registry_stores_unexpected_errors():
    registry = RunRegistry()
    entry = registry.submit(ScenarioConfig())
    with patch("app.services.run_registry.run_scenario", side_effect=RuntimeError("boom")):
        registry.execute(entry.run_id)
    assert registry.get(entry.run_id).error == "unexpected error: boom"


def test_registry_ignores_unknown_ids():
    registry = RunRegistry()
    registry.execute("nope")
    assert registry.get("nope") is None
