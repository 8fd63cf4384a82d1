from __future__ import annotations

from pathlib import Path

import pytest
from fastapi.testclient import TestClient

import app_state
from config import DEFAULT_CONFIG, PROFILES
from conftest import tiny_config_text
from main import app


@pytest.fixture
def client():
    app_state.clear()
    with TestClient(app) as c:
        yield c
    app_state.clear()


def test_root(client):
    body = client.get("/").json()
    assert body["docs"] == "/docs"


def test_profiles(client):
    assert client.get("/api/profiles").json() == PROFILES


def test_validate_bundled_config(client):
    resp = client.post("/api/validate", content=Path(DEFAULT_CONFIG).read_bytes())
    assert resp.status_code == 200
    body = resp.json()
    assert body["valid"] is True
    assert body["cells"] == 4 * 6 * 1
    assert body["deltas"] == [0.4, 0.3, 0.2, 0.1, 0.05, 0.01]


def test_validate_reports_fields(client):
    resp = client.post("/api/validate", content=tiny_config_text().replace("values = [0.9]", "values = [1.5]"))
    assert resp.status_code == 422
    assert resp.json()["detail"]["fields"] == ["risk.values"]


def test_validate_reports_parse_position(client):
    resp = client.post("/api/validate", content='name = "x"\nseeds = [0]\nmethods = = 1\n')
    assert resp.status_code == 422
    assert resp.json()["detail"]["line"] == 3


def test_unknown_run(client):
    assert client.get("/api/runs/does-not-exist").status_code == 404


def test_unknown_profile_is_rejected(client):
    resp = client.post("/api/runs", params={"profile": "nope"}, content=tiny_config_text())
    assert resp.status_code == 422


def test_run_lifecycle(client, tmp_path):
    text = tiny_config_text(output_dir=tmp_path.as_posix(), methods='["chebyshev", "gaussian"]', seeds="[0]")
    resp = client.post("/api/runs", content=text)
    assert resp.status_code == 202
    run_id = resp.json()["run_id"]

    # TestClient runs background tasks before returning
    status = client.get(f"/api/runs/{run_id}").json()
    assert status["status"] == "done"
    assert status["finished_ms"] >= status["created_ms"]
    assert {r["method"] for r in status["rows"]} == {"chebyshev", "gaussian"}
    assert (tmp_path / "summary.csv").exists()

    listed = client.get("/api/runs").json()
    assert [r["run_id"] for r in listed] == [run_id]
    assert "rows" not in listed[0]
