import numpy as np
import pytest
from fastapi.testclient import TestClient

from splat_uncert.raster import render
from splat_uncert.scene import Scene
from splat_uncert.service.app import create_app

from conftest import axis_camera, make_primitive


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture
def payload():
    scene = Scene([make_primitive(uncert=[1.0], udeg=0)], sh_degree_color=0, sh_degree_uncert=0)
    cam = axis_camera(12, 12, 12.0, 5.5, 5.5)
    return scene, cam


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_render_matches_library(client, payload):
    scene, cam = payload
    r = client.post("/render", json={"scene": scene.to_dict(), "camera": cam.to_dict(), "background_uncertainty": 0.5})
    assert r.status_code == 200
    body = r.json()
    from splat_uncert.raster import RenderOptions

    ref = render(scene, cam, RenderOptions(background_uncertainty=0.5))
    assert np.array_equal(np.array(body["uncertainty_raw"]), ref.uncertainty_raw)
    assert np.array_equal(np.array(body["color"]), ref.color)


def test_render_rejects_invalid(client, payload):
    scene, cam = payload
    d = scene.to_dict()
    d["primitives"][0]["opacity"] = 1.5
    assert client.post("/render", json={"scene": d, "camera": cam.to_dict()}).status_code == 422
    c = cam.to_dict()
    c["fx"] = -1
    assert client.post("/render", json={"scene": scene.to_dict(), "camera": c}).status_code == 422


def test_metrics(client):
    e = [[0.4, 0.3], [0.2, 0.1]]
    r = client.post("/metrics", json={"error": e, "uncertainty": e})
    assert r.json() == {"ause": 0.0, "pearson": pytest.approx(1.0), "degenerate": False}
    assert client.post("/metrics", json={"error": [[0.0, 0.0]], "uncertainty": [[1.0, 2.0]]}).status_code == 422


def test_attenuate(client):
    r = client.post("/attenuate", json={"raw": [[0.8, 1.0]], "uncertainty": [[0.25, 1.0]], "threshold": 0.5,
                                        "gt_mask": [[1, 0]]})
    body = r.json()
    assert body["attenuated"] == [[pytest.approx(0.6), 0.0]]
    assert body["mask"] == [[1, 0]] and body["f1"] == 1.0
    assert client.post("/attenuate", json={"raw": [[1.0]], "uncertainty": [[1.0, 1.0]]}).status_code == 422


def test_fit_uncertainty_and_select(client, payload):
    scene, cam = payload
    res = np.full(cam.shape, 0.3).tolist()
    req = {"scene": scene.to_dict(), "views": [{"camera": cam.to_dict(), "residual": res}], "solver": "direct",
           "lambda_reg": 0.1}
    r = client.post("/fit-uncertainty", json=req)
    assert r.status_code == 200
    fitted = Scene.from_dict(r.json()["scene"])
    assert fitted.primitives[0].mean.tolist() == scene.primitives[0].mean.tolist()
    assert r.json()["objective"] >= 0
    sel = client.post("/select-view", json={"scene": r.json()["scene"], "candidates": [cam.to_dict()] * 2})
    assert sel.json()["index"] == 0 and len(sel.json()["scores"]) == 2
