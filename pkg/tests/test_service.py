import base64
import io
import math
import shutil
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from scarceops.automl import SearchSpace
from scarceops.embedder import AutoencoderConfig
from scarceops.errors import NotFoundError, ValidationError
from scarceops.service import (
    EMBEDDING_DRIFT,
    PERFORMANCE_DROP,
    CTConfig,
    MonitorConfig,
    MonitorState,
    Sample,
    ServingRuntime,
    check_drift,
    create_app,
    normalize_image,
)
from scarceops.synthetic import make_family, write_npz
from scarceops.workspace import Workspace

FAST = dict(trials=2, epochs={"fine_tune": 1, "retrain": 2, "dataset_conception": 2}, batch_size=(8,),
            learning_rate=(1e-3, 5e-3))


def _state(window=10, a_base=1.0, dim=2):
    ref = np.random.default_rng(0).normal(size=(500, dim))
    return MonitorState.from_reference("t", "accuracy", ref, a_base, MonitorConfig(window=window))


def _sample(i, label, pred, fp=(0.0, 0.0)):
    return Sample(f"img{i}", list(fp), label, pred)


# -- monitor


def test_window_metric_examples():
    s = _state()
    assert s.windowed_metric() == -math.inf
    for i in range(10):
        s.add(_sample(i, 1, 1))
    assert s.windowed_metric() == 1.0
    for i in range(10):
        s.add(_sample(i, 1, i % 2))
    assert s.windowed_metric() == 0.5
    assert len(s.window) == 10 and s.feedback_count == 20


def test_window_metric_matches_recount():
    rng = np.random.default_rng(3)
    labels, preds = rng.integers(0, 3, 1000), rng.integers(0, 3, 1000)
    s = _state(window=100)
    for i in range(1000):
        s.add(_sample(i, int(labels[i]), int(preds[i])))
        lo = max(0, i + 1 - 100)
        assert s.windowed_metric() == pytest.approx(np.mean(labels[lo : i + 1] == preds[lo : i + 1]))


def test_performance_drop_fires_once_per_window():
    s = _state(window=10, a_base=0.9)
    fired = []
    for i in range(35):
        s.add(_sample(i, 1, 0))
        fired += [(a.kind, a.feedback_count) for a in check_drift(s)]
        # re-checking the same window never repeats an alert
        assert check_drift(s) == []
    assert fired == [(PERFORMANCE_DROP, 10), (PERFORMANCE_DROP, 20), (PERFORMANCE_DROP, 30)]


def test_no_alert_inside_tolerance_or_before_full_window():
    s = _state(window=20, a_base=0.9)
    for i in range(19):
        s.add(_sample(i, 1, 0))
        assert check_drift(s) == []
    s = _state(window=20, a_base=0.9)
    for i in range(60):
        s.add(_sample(i, 1, 0 if i % 20 == 0 else 1))  # A_t = 0.95 >= 0.9 - 0.05
        assert check_drift(s) == []


def test_drift_z_formula_and_alert():
    s = _state(window=4, dim=3)
    fps = 3.0 * np.array([[1, 0, 0], [0, 2, 0], [0, 0, 3], [1, 1, 1]])
    for i, f in enumerate(fps):
        s.add(_sample(i, 0, 0, f))
    expect = np.linalg.norm(fps.mean(0) - s.mu_ref) / (np.linalg.norm(s.sigma_ref) / 2 + 1e-8)
    assert s.drift_z() == pytest.approx(expect)
    kinds = [a.kind for a in check_drift(s)]
    assert kinds == [EMBEDDING_DRIFT]

    calm = _state(window=100)
    ref = np.random.default_rng(11).normal(size=(100, 2))
    for i, f in enumerate(ref):
        calm.add(_sample(i, 0, 0, f))
    assert calm.drift_z() < 3 and check_drift(calm) == []


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=0, max_size=30), st.integers(1, 12))
def test_state_round_trip(pairs, window):
    s = _state(window=window)
    for i, (y, p) in enumerate(pairs):
        s.add(_sample(i, y, p, (float(i), -float(i))))
        check_drift(s)
    t = MonitorState.from_dict(s.to_dict())
    assert t.to_dict() == s.to_dict()
    assert t.windowed_metric() == s.windowed_metric()


def test_custom_detector_is_pluggable():
    s = _state(window=2)
    s.add(_sample(0, 0, 0))
    alerts = check_drift(s, lambda st_: [("CUSTOM", 1.0, 0.5)])
    assert [a.kind for a in alerts] == ["CUSTOM"]


# -- image normalization


def test_normalize_image_layouts_agree():
    rng = np.random.default_rng(0)
    chw = rng.integers(0, 256, (3, 32, 32)).astype(np.uint8)
    ref = chw.astype(np.float32) / 255
    np.testing.assert_array_equal(normalize_image(chw), ref)
    np.testing.assert_array_equal(normalize_image(chw.transpose(1, 2, 0)), ref)
    np.testing.assert_array_equal(normalize_image(chw.tobytes()), ref)
    np.testing.assert_array_equal(normalize_image(chw.tolist()), ref)
    buf = io.BytesIO()
    np.save(buf, chw)
    np.testing.assert_array_equal(normalize_image(buf.getvalue()), ref)
    gray = chw[0]
    assert normalize_image(gray).shape == (3, 32, 32)
    np.testing.assert_allclose(normalize_image(ref), ref)


@pytest.mark.parametrize("bad", [b"", b"\x00" * 10, [[1, 2], [3]], np.zeros((3, 16, 16)), np.full((32, 32), 300),
                                 np.full((32, 32), 1.5), np.full((32, 32), np.nan), "text"])
def test_normalize_image_rejects(bad):
    with pytest.raises(ValidationError):
        normalize_image(bad)


# -- runtime and HTTP API


@pytest.fixture(scope="module")
def base_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc") / "store"
    ws = Workspace(root)
    npz = write_npz(root.parent / "blobs.npz", "blobs", 48, 24, 8, seed=0)
    ws.import_dataset(npz, "blobs")
    ws.import_dataset(write_npz(root.parent / "stripes.npz", "stripes", 24, 8, 8, seed=1), "stripes")
    ws.train_embedder(AutoencoderConfig(epochs=2, batch_size=16))
    task = ws.create_task("blobs", None, "accuracy", "classification")
    ws.develop(task.task_id, 1, SearchSpace(**FAST))
    return root


@pytest.fixture
def store(base_store, tmp_path):
    dst = tmp_path / "store"
    shutil.copytree(base_store, dst)
    return dst


def _images(n, seed=5, shift=0):
    imgs, labels = make_family("blobs", n, seed)
    px = imgs.astype(np.int16) + shift
    return np.clip(px, 0, 255).astype(np.uint8), labels


def test_deploy_supersedes_previous(store):
    rt = ServingRuntime(Workspace(store))
    first = rt.deploy("task-0001")
    second = rt.deploy("task-0001")
    deps = rt.deployments("task-0001")
    assert [d.status for d in deps] == ["superseded", "live"]
    assert rt.live("task-0001").deployment_id == second.deployment_id != first.deployment_id
    assert first.model_id == second.model_id == Workspace(store).models.select_best("task-0001").model_id


def test_deploy_needs_an_embedder(store):
    shutil.rmtree(store / "embedders")
    with pytest.raises(NotFoundError, match="embedder"):
        ServingRuntime(Workspace(store)).deploy("task-0001")


def test_predict_is_deterministic_and_feedback_reuses_image(store):
    rt = ServingRuntime(Workspace(store), MonitorConfig(window=5), CTConfig(enabled=False))
    rt.deploy("task-0001")
    imgs, labels = _images(3)
    a = rt.predict("task-0001", imgs[0])
    b = rt.predict("task-0001", imgs[0].tolist())
    assert a == b and a["prediction"] in (0, 1) and len(a["fingerprint"]) == 2
    out = rt.feedback("task-0001", int(labels[0]), image_id=a["image_id"])
    assert out["feedback_count"] == 1 and out["A_t"] == float(a["prediction"] == labels[0])
    with pytest.raises(NotFoundError):
        rt.feedback("task-0001", 0, image_id="0" * 24)
    with pytest.raises(ValidationError):
        rt.feedback("task-0001", 0)


def test_predict_matches_offline_evaluation_and_is_thread_safe(store):
    from concurrent.futures import ThreadPoolExecutor

    from scarceops.models.networks import infer, network_from_checkpoint

    ws = Workspace(store)
    rt = ServingRuntime(ws, ct=CTConfig(enabled=False))
    dep = rt.deploy("task-0001")
    c = ws.datasets.load_container("blobs", 1)
    val = c.pixels[c.split_slice("val")]
    model = network_from_checkpoint(ws.models.load_checkpoint(ws.models.get_model(dep.model_id).checkpoint_hash))
    offline = np.argmax(infer(model, val.astype(np.float32) / 255), axis=1)
    with ThreadPoolExecutor(4) as pool:
        online = list(pool.map(lambda x: rt.predict("task-0001", x)["prediction"], list(val) * 2))
    assert online == list(offline) * 2


def test_state_survives_restart(store):
    rt = ServingRuntime(Workspace(store), MonitorConfig(window=5), CTConfig(enabled=False))
    rt.deploy("task-0001")
    imgs, labels = _images(4)
    for x, y in zip(imgs, labels):
        rt.feedback("task-0001", int(y), image=x)
    again = ServingRuntime(Workspace(store), MonitorConfig(window=5), CTConfig(enabled=False))
    assert again.state("task-0001").to_dict() == rt.state("task-0001").to_dict()
    assert len(again.metrics("task-0001")) == 4


def test_ct_requests_coalesce_into_one_cycle(store, monkeypatch):
    ws = Workspace(store)
    always = lambda st_: [(PERFORMANCE_DROP, 0.0, 1.0)] if st_.full else []
    rt = ServingRuntime(ws, MonitorConfig(window=6), CTConfig(k=1, space=SearchSpace(**FAST)), detector=always)
    rt.deploy("task-0001")
    before = ws.tasks.get("task-0001")
    gate = threading.Event()
    real = ws.develop

    def slow_develop(*a, **kw):
        gate.wait(30)
        return real(*a, **kw)

    monkeypatch.setattr(ws, "develop", slow_develop)
    imgs, labels = _images(18, shift=120)
    cycles = set()
    for x, y in zip(imgs, labels):
        out = rt.feedback("task-0001", int(y), image=x)
        cycles |= {c["cycle_id"] for c in out["ct"]}
    assert rt.ct_in_flight("task-0001")
    assert len(cycles) == 1
    assert [a["feedback_count"] for a in rt.alerts("task-0001")] == [6, 12, 18]
    gate.set()
    rt.wait_ct("task-0001", 120)
    done = rt.ct_cycles("task-0001")
    assert len(done) == 1 and done[0]["status"] == "succeeded", done
    assert done[0]["coalesced"] >= 1
    after = ws.tasks.get("task-0001")
    assert after.version == before.version + 1
    assert after.current_best_metric >= before.current_best_metric
    assert rt.live("task-0001").model_id == after.best_model_id
    grown = ws.datasets.get("blobs", after.version)
    old = ws.datasets.get("blobs", before.version)
    assert grown.image_count == old.image_count + 6
    assert grown.split_index["val"][1] - grown.split_index["val"][0] == 24


@pytest.fixture
def client(store):
    app = create_app(store, MonitorConfig(window=4), CTConfig(enabled=False))
    with TestClient(app) as c:
        yield c


def test_api_health_and_datasets(client, tmp_path):
    h = client.get("/v1/health").json()
    before = {d["dataset_id"] for d in client.get("/v1/datasets").json()}
    assert h["status"] == "ok" and h["datasets"] == len(before) and h["embedder_version"]
    path = write_npz(tmp_path / "noise.npz", "noise", 16, 8, 8, seed=2)
    r = client.post("/v1/datasets", files={"file": ("noise.npz", path.read_bytes())},
                    data={"name": "noise", "task_kind": "classification"})
    assert r.status_code == 201, r.text
    body = r.json()
    assert body["dataset_id"] == "noise" and body["image_count"] == 32 and body["embedder_version"]
    assert {d["dataset_id"] for d in client.get("/v1/datasets").json()} == before | {"noise"}
    sim = client.get("/v1/datasets/noise/similar", params={"k": 5}).json()
    assert [s["dataset_id"] for s in sim] and all(s["dataset_id"] != "noise" for s in sim)
    assert sim == sorted(sim, key=lambda s: s["distance"])


@pytest.mark.parametrize(
    "method,url,kw,status,code",
    [
        ("get", "/v1/datasets/nope", {}, 404, "not_found"),
        ("get", "/v1/tasks/task-9999", {}, 404, "not_found"),
        ("post", "/v1/datasets", {"files": {"file": ("x.npz", b"not a zip")}, "data": {"name": "x"}}, 400, "bad_npy"),
        ("post", "/v1/datasets", {"data": {"name": "x"}}, 400, "validation"),
        ("post", "/v1/tasks", {"json": {"dataset_id": "blobs", "metric": "bleu"}}, 400, "validation"),
        ("post", "/v1/tasks", {"json": {"dataset_id": "blobs", "extra": 1}}, 400, "validation"),
        ("post", "/v1/tasks/task-0001/predict", {}, 400, "validation"),
        ("post", "/v1/tasks/task-0001/predict", {"content": b"{", "headers": {"content-type": "application/json"}},
         400, "validation"),
        ("post", "/v1/tasks/task-0001/predict", {"json": {"image": [[1, 2]]}}, 400, "validation"),
        ("post", "/v1/tasks/task-0001/predict", {"json": {"npy_b64": "%%%"}}, 400, "validation"),
        ("post", "/v1/tasks/task-0001/feedback", {"json": {"label": 1}}, 400, "validation"),
        ("post", "/v1/tasks/task-0001/deploy", {"json": {"model_id": "m-missing"}}, 404, "not_found"),
    ],
)
def test_api_errors(client, method, url, kw, status, code):
    if "predict" in url or "feedback" in url:
        client.post("/v1/tasks/task-0001/deploy")
    r = getattr(client, method)(url, **kw)
    assert r.status_code == status, r.text
    assert r.json()["error"]["code"] == code and r.json()["error"]["message"]


def test_api_predict_before_deploy_is_404(client):
    img = _images(1)[0][0]
    r = client.post("/v1/tasks/task-0001/predict", json={"image": img.tolist()})
    assert r.status_code == 404


def test_api_serving_flow(client):
    dep = client.post("/v1/tasks/task-0001/deploy").json()
    assert dep["status"] == "live"
    imgs, labels = _images(5)
    buf = io.BytesIO()
    np.save(buf, imgs[0])
    as_json = client.post("/v1/tasks/task-0001/predict", json={"image": imgs[0].tolist()}).json()
    as_npy = client.post("/v1/tasks/task-0001/predict",
                         json={"npy_b64": base64.b64encode(buf.getvalue()).decode()}).json()
    as_raw = client.post("/v1/tasks/task-0001/predict", content=imgs[0].transpose(2, 0, 1).tobytes(),
                         headers={"content-type": "application/octet-stream"}).json()
    assert as_json == as_npy == as_raw
    assert as_json["model_id"] == dep["model_id"]
    for i, (x, y) in enumerate(zip(imgs, labels)):
        pred = client.post("/v1/tasks/task-0001/predict", json={"image": x.tolist()}).json()
        fb = client.post("/v1/tasks/task-0001/feedback", json={"image_id": pred["image_id"], "label": int(y)})
        assert fb.status_code == 200, fb.text
        assert fb.json()["feedback_count"] == i + 1
    points = client.get("/v1/tasks/task-0001/metrics").json()
    assert [p["feedback_count"] for p in points] == [1, 2, 3, 4, 5]
    assert all(0 <= p["value"] <= 1 for p in points)
    assert isinstance(client.get("/v1/tasks/task-0001/alerts").json(), list)
    assert client.get("/v1/tasks/task-0001/ct").json() == {"in_flight": False, "cycles": []}


def test_api_develop_and_tasks(client):
    r = client.post("/v1/tasks", json={"dataset_id": "stripes"})
    assert r.status_code == 201
    tid = r.json()["task_id"]
    assert r.json()["current_best_metric"] is None
    out = client.post(f"/v1/tasks/{tid}/develop",
                      json={"k": 1, "trials": 1, "epochs": {"retrain": 1, "dataset_conception": 1},
                            "batch_size": [8]})
    assert out.status_code == 200, out.text
    body = out.json()
    assert body["best_model_id"].startswith("m-") and body["A_t"] == body["metric_value"]
    assert len(client.get("/v1/tasks").json()) == 2
