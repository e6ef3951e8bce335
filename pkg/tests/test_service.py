import time

import pytest
from fastapi.testclient import TestClient

from sitcom import __version__
from sitcom.service import create_app

TINY = {"total_env_steps": 300, "checkpoint_every_steps": 100, "hidden_size": 8}


@pytest.fixture
def client(tmp_path):
    with TestClient(create_app(tmp_path / "runs")) as c:
        yield c


def wait_done(client, run_id, timeout=60.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        status = client.get(f"/runs/{run_id}").json()
        if status["state"] in ("finished", "failed"):
            return status
        time.sleep(0.05)
    raise AssertionError(f"run {run_id} did not finish")


def test_health_and_layouts(client):
    assert client.get("/health").json() == {"status": "ok", "version": __version__}
    ids = client.get("/layouts").json()
    assert ids == ["tmaze", "dead_ends", "four_rooms"]
    info = client.get("/layouts/tmaze").json()
    assert info["s_opt"] == 9 and len(info["goal_candidates"]) == 4
    assert client.get("/layouts/nowhere").status_code == 422


def test_oracle(client):
    rep = client.get("/oracle/tmaze").json()
    assert rep["layout"] == "tmaze" and len(rep["rows"]) == 8
    assert all(r["M_t"] == 1.0 for r in rep["rows"])
    assert client.get("/oracle/tmaze", params={"episodes_per_goal": 0}).status_code == 422


def test_train_then_eval(client, tmp_path):
    r = client.post("/runs", json={"config": TINY, "name": "tiny"})
    assert r.status_code == 202 and r.json()["id"] == "tiny"
    status = wait_done(client, "tiny")
    assert status["state"] == "finished", status.get("error")
    assert status["finals"]["env_steps"] >= 300
    assert (tmp_path / "runs" / "tiny" / "checkpoints" / "final.bin").is_file()

    recs = client.get("/runs/tiny/log", params={"limit": 3}).json()
    assert [r["episode"] for r in recs] == [1, 2, 3]
    assert [r["id"] for r in client.get("/runs").json()] == ["tiny"]

    body = {"checkpoint": "tiny/checkpoints/final.bin", "episodes": 3, "seed": 1}
    a = client.post("/eval", json=body)
    assert a.status_code == 200
    assert a.json() == client.post("/eval", json=body).json()
    assert a.json()["config_hash"] == status["config_hash"]


def test_error_statuses(client, tmp_path):
    assert client.get("/runs/ghost").status_code == 404
    assert client.post("/runs", json={"config": {"rep_size": 3}}).status_code == 422
    assert client.post("/runs", json={"name": "bad name!"}).status_code == 422
    assert client.post("/runs", json={"config": TINY, "name": "dup"}).status_code == 202
    assert client.post("/runs", json={"config": TINY, "name": "dup"}).status_code == 409
    wait_done(client, "dup")
    assert client.post("/eval", json={"checkpoint": "dup/nope.bin"}).status_code == 404
    assert client.post("/eval", json={"checkpoint": "../../etc/passwd"}).status_code == 400
    assert client.post("/eval", json={"checkpoint": "dup/checkpoints/final.bin", "episodes": 0}).status_code == 422
    (tmp_path / "runs" / "junk.bin").write_bytes(b"not a checkpoint")
    assert client.post("/eval", json={"checkpoint": "junk.bin"}).status_code == 422
