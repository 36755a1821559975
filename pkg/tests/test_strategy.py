from fractions import Fraction
import math
import statistics

import numpy as np
import pytest

from scarceops.datasets import DatasetStore, ImageContainer
from scarceops.embedder import DatasetEmbedding
from scarceops.errors import ValidationError
from scarceops.strategy import (
    StrategyConfig,
    StrategyPlan,
    TaskStore,
    conceive_dataset,
    metadata_affinity,
    rank_strategies,
    rank_strategies_metadata_only,
)

KIND_ORDER = {"reuse": 0, "fine_tune": 1, "dataset_conception": 2, "retrain": 3}


def _container(name, labels, classes, seed):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(len(labels), 3, 32, 32), dtype=np.uint8)
    return ImageContainer(name, px, np.array(labels), {"train": (0, len(labels))}, classes)


def _add(store, name, mean, labels=(0, 1), classes=("a", "b"), perfs=(), kind="classification", seed=None,
         codes=None, ver="E"):
    seed = seed if seed is not None else abs(hash((name, tuple(mean)))) % 2**31
    rec = store.register(_container(name, list(labels), list(classes), seed), name, kind)
    n = rec.image_count
    codes = np.tile(np.asarray(mean, np.float64), (n, 1)) if codes is None else np.asarray(codes)
    store.attach_fingerprints(name, rec.version, codes, DatasetEmbedding([float(v) for v in mean], n, ver))
    for model_id, metric, value in perfs:
        store.add_known_performance(name, rec.version, model_id, metric, value)
    return store.get(name, rec.version)


def _task(tmp_path, dataset_id, version=1, metric="accuracy", kind="classification"):
    return TaskStore(tmp_path).create(dataset_id, version, metric, kind)


def _sig(plans):
    return [(p.kind, p.source_model, tuple(p.source_datasets), p.score, p.estimated_cost) for p in plans]


# ---------------------------------------------------------------- examples

def test_identical_dataset_reuse_first(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "query", [1.0, 2.0])
    _add(store, "twin", [1.0, 2.0], perfs=[("m-good", "accuracy", 0.9)])
    _add(store, "far", [9.0, 9.0], perfs=[("m-far", "accuracy", 0.99)])
    plans = rank_strategies(_task(tmp_path, "query"), store, k=10)
    assert plans[0].kind == "reuse" and plans[0].source_model == "m-good"
    assert plans[0].score == pytest.approx(0.9)
    assert plans[0].estimated_cost == 0
    assert plans[1].kind == "fine_tune" and plans[1].estimated_cost == 5
    assert all(p.fingerprint_based for p in plans)


def test_empty_registry_gives_retrain(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "only", [0.0, 0.0])
    plans = rank_strategies(_task(tmp_path, "only"), store, k=5)
    assert [(p.kind, p.score, p.estimated_cost) for p in plans] == [("retrain", 0.5, 30)]
    assert [p.kind for p in rank_strategies_metadata_only(_task(tmp_path, "only"), store, k=3)] == ["retrain"]


def test_preconditions(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0])
    store.register(_container("raw", [0], ["a"], 1), "raw")
    with pytest.raises(ValidationError, match="k"):
        rank_strategies(_task(tmp_path, "q"), store, k=0)
    with pytest.raises(ValidationError, match="no fingerprints"):
        rank_strategies(_task(tmp_path, "raw"), store, k=1)
    assert rank_strategies(_task(tmp_path, "raw"), store, k=1, use_fingerprints=False)[0].kind == "retrain"


def test_plan_invariants():
    with pytest.raises(ValidationError):
        StrategyPlan("reuse", 3, 0.5, "x", True, source_model="m")
    with pytest.raises(ValidationError):
        StrategyPlan("dataset_conception", 30, 0.5, "x", True)
    with pytest.raises(ValidationError):
        StrategyPlan("teleport", 1, 0.5, "x", True)
    p = StrategyPlan("fine_tune", 5, 0.25, "x", True, source_model="m", source_datasets=["d@v1"])
    assert StrategyPlan.from_dict(p.to_dict()) == p


def test_duplicate_models_collapse(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0])
    _add(store, "n1", [0.0, 1.0], perfs=[("m-shared", "accuracy", 0.8)])
    _add(store, "n2", [0.0, 2.0], perfs=[("m-shared", "accuracy", 0.8)])
    plans = rank_strategies(_task(tmp_path, "q"), store, k=10)
    reuse = [p for p in plans if p.kind == "reuse"]
    assert len(reuse) == 1
    assert reuse[0].source_datasets == ["n1@v1"]  # the closer neighbour keeps the plan


def test_neg_mse_utility(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0], kind="reconstruction")
    _add(store, "n", [0.0, 0.0], kind="reconstruction", perfs=[("m", "neg_mse", -0.02)])
    t = _task(tmp_path, "q", metric="neg_mse", kind="reconstruction")
    plans = rank_strategies(t, store, k=1)
    assert plans[0].kind == "reuse" and plans[0].score == pytest.approx(0.98)


# ---------------------------------------------------------------- oracles

def _random_registry(tmp_path, rng, n=10):
    store = DatasetStore(tmp_path)
    pool = ["a", "b", "c", "d", "e"]
    names = []
    for i in range(n):
        name = f"d{i:02d}"
        k = int(rng.integers(1, 4))
        classes = sorted(rng.choice(pool, size=k, replace=False).tolist())
        labels = rng.integers(0, k, size=int(rng.integers(1, 6))).tolist()
        kind = "classification" if rng.random() < 0.8 else "reconstruction"
        mean = rng.integers(-4, 5, size=2).astype(float).tolist()  # lattice to create distance ties
        perfs = [(f"m{i:02d}-{j}", str(rng.choice(["accuracy", "macro_f1"])), float(rng.choice([0.3, 0.6, 0.9])))
                 for j in range(int(rng.integers(0, 3)))]
        _add(store, name, mean, labels, classes, perfs, kind, seed=int(rng.integers(2**31)))
        if rng.random() < 0.3:  # a second version of the same dataset
            _add(store, name, (np.array(mean) + rng.integers(-1, 2, size=2)).tolist(), labels[::-1] + [0],
                 classes, [(f"m{i:02d}-v2", "accuracy", float(rng.choice([0.3, 0.9])))], kind,
                 seed=int(rng.integers(2**31)))
        names.append(name)
    return store, names


def _best_perf(rec, metric):
    best = None
    for p in rec.known_performances:
        if p["metric_name"] != metric:
            continue
        if best is None or p["value"] > best["value"] or (p["value"] == best["value"] and p["model_id"] < best["model_id"]):
            best = p
    return best


def _sort_and_dedupe(cands, k):
    cands.sort(key=lambda c: (-c[3], c[4], KIND_ORDER[c[0]], c[1] or "", c[2]))
    out, seen = [], set()
    for c in cands:
        ident = (c[0], c[1], c[2] if c[0] == "dataset_conception" else ())
        if ident not in seen:
            seen.add(ident)
            out.append(c)
    return out[:k]


def _fingerprint_oracle(store, task, k, cfg):
    recs = store.list()
    q = store.get(task.dataset_id, task.version)
    qv = q.fingerprint_ref["embedding"]["mean_vector"]
    means = [r.fingerprint_ref["embedding"]["mean_vector"] for r in recs]
    pair = [math.dist(means[i], means[j]) for i in range(len(means)) for j in range(i + 1, len(means))]
    tau = statistics.median(pair) if pair else 1.0
    tau = tau if tau > 0 else 1.0
    dist = sorted(((math.dist(r.fingerprint_ref["embedding"]["mean_vector"], qv), r.version, r.dataset_id, r)
                   for r in recs), key=lambda t: t[:3])
    cands = [("retrain", None, (), 0.5, 30)]
    for d, _, _, r in dist[: cfg.neighbours]:
        best = _best_perf(r, task.metric_name)
        if best:
            w = math.exp(-d / tau)
            u = min(1.0, max(0.0, best["value"]))
            cands.append(("reuse", best["model_id"], (r.key,), w * u, 0))
            cands.append(("fine_tune", best["model_id"], (r.key,), w * u, 5))
    latest = {}
    for r in recs:
        if r.dataset_id != task.dataset_id and (r.dataset_id not in latest or latest[r.dataset_id].version < r.version):
            latest[r.dataset_id] = r
    pool = 0
    for r in latest.values():
        for counts in r.class_distribution.values():
            pool += sum(c for name, c in counts.items() if name in q.class_labels)
    if pool >= cfg.conception_min_pool and latest:
        near = sorted(((math.dist(r.fingerprint_ref["embedding"]["mean_vector"], qv), r.version, r.dataset_id, r)
                       for r in latest.values()), key=lambda t: t[:3])[: cfg.neighbours]
        mean_w = sum(math.exp(-d / tau) for d, *_ in near) / len(near)
        cands.append(("dataset_conception", None, tuple(t[3].key for t in near), min(1.0, 0.5 * (1 + mean_w)), 30))
    return _sort_and_dedupe(cands, k)


def _metadata_oracle(store, task, k, cfg):
    q = store.get(task.dataset_id, task.version)

    def dist(rec):
        tot = {}
        for counts in rec.class_distribution.values():
            for c, v in counts.items():
                tot[c] = tot.get(c, 0) + v
        s = sum(tot.values())
        return {c: Fraction(v, s) for c, v in tot.items()}

    pq = dist(q)
    scored = []
    for r in store.list():
        kind = 1 if r.task_kind == q.task_kind else 0
        a, b = set(q.class_labels), set(r.class_labels)
        jac = Fraction(len(a & b), len(a | b))
        pr = dist(r)
        tv = sum(abs(pq.get(c, 0) - pr.get(c, 0)) for c in set(pq) | set(pr)) / 2
        scored.append(((kind + jac + 1 - tv) / 3, r))
    # exact rationals: equal affinities tie and fall through to (version, id)
    scored.sort(key=lambda t: (-t[0], t[1].version, t[1].dataset_id))
    cands = [("retrain", None, (), 0.5, 30)]
    for exact, r in scored[: cfg.neighbours]:
        aff = float(exact)
        best = _best_perf(r, task.metric_name)
        if best:
            u = min(1.0, max(0.0, best["value"]))
            cands.append(("reuse", best["model_id"], (r.key,), aff * u, 0))
            cands.append(("fine_tune", best["model_id"], (r.key,), aff * u, 5))
    return _sort_and_dedupe(cands, k)


def test_rankings_match_brute_force_oracles_on_100_registries(tmp_path):
    rng = np.random.default_rng(99)
    checked_conception = 0
    for trial in range(100):
        root = tmp_path / f"r{trial}"
        store, names = _random_registry(root, rng)
        cfg = StrategyConfig(conception_min_pool=int(rng.choice([5, 15, 1000])))
        target = names[int(rng.integers(len(names)))]
        rec = store.get(target)
        task = TaskStore(root).create(target, rec.version, "accuracy", "classification")
        k = int(rng.integers(1, 15))
        got = [(p.kind, p.source_model, tuple(p.source_datasets), p.score, p.estimated_cost)
               for p in rank_strategies(task, store, k, config=cfg)]
        want = _fingerprint_oracle(store, task, k, cfg)
        assert [g[:3] + (g[4],) for g in got] == [w[:3] + (w[4],) for w in want]
        np.testing.assert_allclose([g[3] for g in got], [w[3] for w in want], rtol=1e-12)
        checked_conception += any(g[0] == "dataset_conception" for g in got)

        got_md = rank_strategies_metadata_only(task, store, k, config=cfg)
        want_md = _metadata_oracle(store, task, k, cfg)
        assert [(p.kind, p.source_model, tuple(p.source_datasets), p.estimated_cost) for p in got_md] == \
               [w[:3] + (w[4],) for w in want_md]
        np.testing.assert_allclose([p.score for p in got_md], [w[3] for w in want_md], rtol=1e-12)
        assert not any(p.fingerprint_based for p in got_md)
        # the k=1 answer is the head of the full ranking
        assert _sig(rank_strategies(task, store, 1, config=cfg)) == _sig(rank_strategies(task, store, 100, config=cfg))[:1]
    assert checked_conception > 10


@pytest.mark.parametrize("factor", [0.25, 2.0, 8.0, 1024.0])
def test_scale_invariance(tmp_path, factor):
    rng = np.random.default_rng(3)
    means = rng.normal(0, 3, size=(8, 2))
    perfs = rng.choice([0.5, 0.7, 0.9], size=8)
    rankings = []
    for scale in (1.0, factor):
        store = DatasetStore(tmp_path / f"s{scale}")
        for i, (m, p) in enumerate(zip(means, perfs)):
            _add(store, f"d{i}", (m * scale).tolist(), perfs=[(f"m{i}", "accuracy", float(p))], seed=i)
        task = TaskStore(tmp_path / f"s{scale}").create("d0", 1, "accuracy", "classification")
        default = rank_strategies(task, store, 100)
        explicit = rank_strategies(task, store, 100, config=StrategyConfig(tau=0.75 * scale))
        rankings.append((_sig(default), _sig(explicit)))
    assert rankings[0] == rankings[1]


def test_monotone_in_known_performance(tmp_path):
    rng = np.random.default_rng(11)
    for trial in range(15):
        root = tmp_path / f"m{trial}"
        store, names = _random_registry(root, rng, n=6)
        task = TaskStore(root).create(names[0], store.get(names[0]).version, "accuracy", "classification")
        before = rank_strategies(task, store, 100)
        movable = [p for p in before if p.kind == "reuse"]
        if not movable:
            continue
        target = movable[int(rng.integers(len(movable)))]
        dsid, ver = target.source_datasets[0].split("@v")
        current = max(p["value"] for p in store.get(dsid, int(ver)).known_performances
                      if p["model_id"] == target.source_model and p["metric_name"] == "accuracy")
        store.add_known_performance(dsid, int(ver), target.source_model, "accuracy", min(1.0, current + 0.2))
        after = rank_strategies(task, store, 100)
        pos = lambda plans: next(i for i, p in enumerate(plans)
                                 if p.kind == "reuse" and p.source_model == target.source_model)
        assert pos(after) <= pos(before)


def test_metadata_affinity_examples(tmp_path):
    store = DatasetStore(tmp_path)
    a = _add(store, "a", [0, 0], labels=[0, 1, 1], classes=["x", "y"])
    same = _add(store, "same", [5, 5], labels=[0, 1, 1], classes=["x", "y"], seed=3)
    other = _add(store, "other", [5, 5], labels=[0, 0], classes=["p", "q"], kind="reconstruction", seed=4)
    assert metadata_affinity(a, same) == 1.0
    assert metadata_affinity(a, other) == 0.0
    store.add_known_performance("other", 1, "m-other", "accuracy", 1.0)
    store.add_known_performance("same", 1, "m-same", "accuracy", 0.8)
    plans = rank_strategies_metadata_only(_task(tmp_path, "a"), store, k=10)
    assert plans[0].source_model == "m-same"
    kinds = [(p.kind, p.source_model) for p in plans]
    assert kinds.index(("retrain", None)) < kinds.index(("reuse", "m-other"))
    assert all(p.score == 0.0 for p in plans if p.source_model == "m-other")


def test_zero_affinity_loses_to_retrain(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "a", [0, 0], labels=[0, 1], classes=["x", "y"])
    _add(store, "other", [0, 0], labels=[0, 0], classes=["p", "q"], kind="reconstruction",
         perfs=[("m-other", "accuracy", 1.0)], seed=4)
    assert rank_strategies_metadata_only(_task(tmp_path, "a"), store, k=1)[0].kind == "retrain"


# ---------------------------------------------------------------- conception

def test_conceive_reproduces_identical_dataset(tmp_path):
    store = DatasetStore(tmp_path)
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(6, 2))
    src = _container("orig", [0, 1, 0, 1, 1, 0], ["a", "b"], 5)
    store.register(src, "orig")
    store.attach_fingerprints("orig", 1, codes, DatasetEmbedding(codes.mean(0).tolist(), 6, "E"))
    store.register(_container("copy", [0, 1, 0, 1, 1, 0], ["a", "b"], 5), "copy")
    store.attach_fingerprints("copy", 1, codes, DatasetEmbedding(codes.mean(0).tolist(), 6, "E"))
    rec = conceive_dataset(_task(tmp_path, "orig"), store, n=6)
    c = store.load_container(rec.dataset_id)
    assert sorted(p.tobytes() for p in c.pixels) == sorted(p.tobytes() for p in src.pixels)
    pairs = sorted((p.tobytes(), int(l)) for p, l in zip(c.pixels, c.labels))
    assert pairs == sorted((p.tobytes(), int(l)) for p, l in zip(src.pixels, src.labels))
    assert "copy@v1 (6 images)" in rec.source_note
    assert conceive_dataset(_task(tmp_path, "orig"), store, n=6).content_hash == rec.content_hash


def test_conceive_single_nearest_image(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0], labels=[0], classes=["a"])
    _add(store, "src", [2.0, 0.0], labels=[0, 0, 0], classes=["a"], codes=[[5, 0], [0.5, 0], [3, 0]])
    rec = conceive_dataset(_task(tmp_path, "q"), store, n=1)
    c = store.load_container(rec.dataset_id)
    np.testing.assert_array_equal(c.pixels[0], store.load_container("src").pixels[1])


def test_conceive_stratified_tie_uses_both_sources(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0], labels=[0, 1], classes=["a", "b"])
    _add(store, "left", [-1.0, 0.0], labels=[0, 1, 0, 1], classes=["a", "b"], seed=10)
    _add(store, "right", [1.0, 0.0], labels=[1, 0, 1, 0], classes=["a", "b"], seed=11)
    rec = conceive_dataset(_task(tmp_path, "q"), store, n=4, stratify=True)
    assert "left@v1 (2 images)" in rec.source_note and "right@v1 (2 images)" in rec.source_note
    flat = conceive_dataset(_task(tmp_path, "q"), store, n=4, stratify=False, name="flat")
    assert "right" not in flat.source_note  # all-equal distances fall back to dataset order


def test_conceive_relabels_by_class_name(tmp_path):
    store = DatasetStore(tmp_path)
    _add(store, "q", [0.0, 0.0], labels=[0, 1], classes=["cat", "dog"])
    _add(store, "zoo", [0.0, 0.0], labels=[0, 1, 2], classes=["dog", "emu", "cat"], seed=8)
    rec = conceive_dataset(_task(tmp_path, "q"), store, n=10)
    c = store.load_container(rec.dataset_id)
    assert c.classes == ["cat", "dog"]
    assert rec.image_count == 2
    zoo = store.load_container("zoo")
    got = {p.tobytes(): c.classes[l] for p, l in zip(c.pixels, c.labels)}
    assert got == {zoo.pixels[0].tobytes(): "dog", zoo.pixels[2].tobytes(): "cat"}
