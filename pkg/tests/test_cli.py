import json
import re

import pytest

from scarceops.cli import main
from scarceops.synthetic import write_npz

FAMILIES = ("blobs", "stripes", "noise")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    lines = [l for l in err.splitlines() if l.startswith("{")]
    assert len(lines) == 1, err
    return json.loads(lines[0])["error"]


@pytest.fixture
def corpus(tmp_path):
    return {k: write_npz(tmp_path / f"{k}.npz", k, 24, 12, 4, seed=i) for i, k in enumerate(FAMILIES)}


@pytest.fixture
def store(tmp_path, corpus, capsys):
    root = tmp_path / "store"
    for k, path in corpus.items():
        assert run(capsys, "--store", root, "dataset", "import", path, "--name", k)[0] == 0
    assert run(capsys, "--store", root, "embedder", "train", "--epochs", "1", "--batch-size", "16")[0] == 0
    return root


def test_usage_errors_exit_2(capsys, tmp_path):
    code, out, err = run(capsys, "--store", tmp_path, "bogus")
    assert code == 2 and out == "" and _error(err)["code"] == "usage"
    code, _, err = run(capsys, "--store", tmp_path, "task", "create", "x", "--metric", "bleu")
    assert code == 2 and "bleu" in _error(err)["message"]


def test_missing_store_is_a_validation_error(capsys, monkeypatch):
    monkeypatch.delenv("SCARCEOPS_STORE", raising=False)
    code, _, err = run(capsys, "dataset", "list")
    assert code == 4 and "SCARCEOPS_STORE" in _error(err)["message"]


def test_env_var_selects_store(capsys, monkeypatch, store):
    monkeypatch.setenv("SCARCEOPS_STORE", str(store))
    code, out, _ = run(capsys, "--json", "dataset", "list")
    assert code == 0 and {d["dataset_id"] for d in json.loads(out)} == set(FAMILIES)


def test_missing_embedder_and_unknown_ids(capsys, tmp_path, corpus):
    root = tmp_path / "bare"
    assert run(capsys, "--store", root, "dataset", "import", corpus["blobs"], "--name", "blobs")[0] == 0
    code, _, err = run(capsys, "--store", root, "plot", "latent", "--out", tmp_path / "x.svg")
    assert code == 3 and "embedder" in _error(err)["message"]
    code, _, err = run(capsys, "--store", root, "task", "deploy", "task-0042")
    assert code == 3 and _error(err)["code"] == "not_found"
    code, _, err = run(capsys, "--store", root, "similar", "nope")
    assert code == 3
    code, _, err = run(capsys, "--store", root, "dataset", "import", tmp_path / "missing.npz")
    assert code == 3


def test_best_before_develop_fails(capsys, store):
    assert run(capsys, "--store", store, "task", "create", "blobs")[0] == 0
    code, out, err = run(capsys, "--store", store, "task", "best", "task-0001")
    assert code == 3 and out == ""
    assert "no succeeded runs" in _error(err)["message"]


def test_plot_latent_has_one_legend_and_marker_per_dataset(capsys, store, tmp_path):
    svg = tmp_path / "latent.svg"
    code, out, _ = run(capsys, "--store", store, "--json", "plot", "latent", "--out", svg)
    assert code == 0 and json.loads(out)["datasets"] == ["blobs@v1", "noise@v1", "stripes@v1"]
    text = svg.read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert len(re.findall(r'class="legend-entry"', text)) == 3
    assert len(re.findall(r'class="mean-marker"', text)) == 3
    assert len(re.findall(r"<circle ", text)) == 3 * 40


def test_similar_json_is_sorted(capsys, store):
    code, out, err = run(capsys, "--store", store, "--json", "similar", "blobs", "-k", "5")
    rows = json.loads(out)
    assert code == 0 and [r["dataset_id"] for r in rows] and "blobs" not in [r["dataset_id"] for r in rows]
    assert [r["distance"] for r in rows] == sorted(r["distance"] for r in rows)
    assert err.strip()  # human summary always goes to stderr


def test_develop_is_deterministic_given_seed(capsys, tmp_path, corpus):
    ids = []
    for name in ("a", "b"):
        root = tmp_path / name
        for k, path in corpus.items():
            run(capsys, "--store", root, "dataset", "import", path, "--name", k)
        run(capsys, "--store", root, "embedder", "train", "--epochs", "1", "--seed", "3")
        run(capsys, "--store", root, "task", "create", "stripes")
        code, out, _ = run(capsys, "--store", root, "--json", "task", "develop", "task-0001", "-k", "2",
                           "--trials", "2", "--epochs", "1", "--batch-size", "8", "--seed", "5")
        assert code == 0
        ids.append(json.loads(out)["best_model_id"])
        code, out, _ = run(capsys, "--store", root, "--json", "task", "best", "task-0001")
        assert json.loads(out)["model"]["model_id"] == ids[-1]
    assert ids[0] == ids[1]


def test_deploy_and_simulate_drift(capsys, store):
    run(capsys, "--store", store, "task", "create", "blobs")
    run(capsys, "--store", store, "task", "develop", "task-0001", "--trials", "1", "--epochs", "1",
        "--batch-size", "8")
    code, out, _ = run(capsys, "--store", store, "--json", "task", "deploy", "task-0001")
    assert code == 0 and json.loads(out)["status"] == "live"
    code, out, err = run(capsys, "--store", store, "--json", "monitor", "simulate-drift", "task-0001",
                         "--window", "10", "--no-ct")
    assert code == 0, err
    res = json.loads(out)
    assert res["ct"] == [] and res["A_before"] == res["A_after"]
    assert all(a["phase"] in ("clean", "shifted") for a in res["alerts"])
