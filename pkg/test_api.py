"""
Test the HTTP API responses
"""

import pytest
from fastapi.testclient import TestClient

from app import app
from database import db_manager

client = TestClient(app)

LOW_BIAS = {"operating_point": {"illuminance": 0.1}, "bias": {"I_pr": 1e-11}}


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_rate_with_default_config():
    response = client.post("/api/rate")
    assert response.status_code == 200
    data = response.json()
    assert data["reference"] == "fixed"
    assert data["total_rate"] == pytest.approx(data["on_rate"] + data["off_rate"])
    assert data["units"]["total_rate"] == "Hz"


def test_rate_renewal_with_ablation():
    full = client.post("/api/rate", params={"reference": "renewal"}, json=LOW_BIAS).json()
    quiet = client.post("/api/rate", params={"reference": "renewal", "disable": ["pr"]}, json=LOW_BIAS).json()
    assert quiet["total_rate"] < full["total_rate"]


def test_psd_columns():
    data = client.post("/api/psd", params={"node": "v_sf"}).json()
    assert data["node"] == "v_sf"
    assert len(data["f_hz"]) == len(data["psd_total"]) == len(data["psd_sf"])


def test_tf_and_rms():
    tf = client.post("/api/tf", params={"node": "v_sf"}, json=LOW_BIAS).json()
    assert tf["poles"]["closed_form"]["regime"] == "near-coincident"
    rms = client.post("/api/rms", json=LOW_BIAS).json()
    assert rms["rms_tc"]["pr"] > 0
    assert 0 < rms["budget"]["photon_fraction"] < 1


def test_invalid_config_is_422():
    response = client.post("/api/rate", json={"operating_point": {"I_pd": -1.0}})
    assert response.status_code == 422
    assert response.json()["detail"]["error"] == "ConfigError"


def test_unknown_source_is_422():
    response = client.post("/api/psd", params={"disable": ["thermal"]})
    assert response.status_code == 422
    assert response.json()["detail"]["error"] == "DomainError"


def test_unknown_node_is_rejected():
    assert client.post("/api/psd", params={"node": "v_out"}).status_code == 422


def test_sweep_is_recorded_with_points():
    body = {
        "operating_point": {"illuminance": 0.1},
        "sweep": {"I_pr": [1e-11, 1e-9], "metrics": ["rate"]},
    }
    data = client.post("/api/sweep", json=body).json()
    assert len(data["records"]) == 2
    assert len(data["plateau"]) == 1

    runs = client.get("/api/runs", params={"command": "sweep", "limit": 1}).json()
    assert runs[0]["command"] == "sweep"
    run = client.get(f"/api/runs/{runs[0]['id']}").json()
    assert [p["i_pr"] for p in run["sweep_points"]] == [1e-11, 1e-9]


def test_simulate_truncates_events():
    body = {**LOW_BIAS, "simulation": {"duration": 0.5, "seed": 3}}
    data = client.post("/api/simulate", params={"max_events": 0}, json=body).json()
    assert data["events"] == []
    assert data["summary"]["seed"] == 3


def test_optimize():
    data = client.post("/api/optimize").json()
    assert data["rationale"] == "sf-limited"
    assert data["units"]["I_sf"] == "A"


def test_missing_run_is_404():
    assert client.get("/api/runs/999999").status_code == 404


def test_registry_records_runs():
    before = len(db_manager.list_runs(limit=1000))
    client.post("/api/rate")
    assert len(db_manager.list_runs(limit=1000)) == before + 1
