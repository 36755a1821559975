"""Ranking of model-development approaches for a task.

Each neighbouring dataset contributes its best known model twice (reuse as
is, or fine-tune it); retraining from scratch is always offered and pooling
the nearest stored images into a new training set is offered when enough
of them exist. Scores combine how close the neighbour is with how well its
model performed; ties go to the cheaper approach.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from ..datasets.container import UNLABELED, ImageContainer
from ..datasets.store import DatasetRecord, DatasetStore
from ..errors import NotFoundError, ValidationError
from .tasks import TaskSpec

KINDS = ("reuse", "fine_tune", "dataset_conception", "retrain")
KIND_ORDER = {k: i for i, k in enumerate(KINDS)}


@dataclass
class StrategyPlan:
    kind: str
    estimated_cost: int
    score: float
    rationale: str
    fingerprint_based: bool
    source_model: Optional[str] = None
    source_datasets: list[str] = field(default_factory=list)
    similarity: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown plan kind {self.kind!r}")
        if self.kind == "reuse" and self.estimated_cost != 0:
            raise ValidationError("reuse plans cost nothing to train")
        if self.kind in ("reuse", "fine_tune") and not self.source_model:
            raise ValidationError(f"{self.kind} plans need a source model")
        if self.kind == "dataset_conception" and not self.source_datasets:
            raise ValidationError("dataset conception needs source datasets")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyPlan":
        return cls(**d)


def plan_key(p: StrategyPlan) -> tuple:
    """Total order: score desc, cost asc, kind, then source identifiers."""
    return (-p.score, p.estimated_cost, KIND_ORDER[p.kind], p.source_model or "", tuple(p.source_datasets))


@dataclass
class StrategyConfig:
    neighbours: int = 5
    tau: Optional[float] = None
    retrain_prior: float = 0.5
    fine_tune_epochs: int = 5
    full_epochs: int = 30
    conception_min_pool: int = 32
    conception_size: Optional[int] = None

    def cost(self, kind: str) -> int:
        return {"reuse": 0, "fine_tune": self.fine_tune_epochs}.get(kind, self.full_epochs)


class Scorer(Protocol):
    def __call__(self, kind: str, similarity: float, performance: float, metric_name: str) -> float: ...


def utility(performance: float, metric_name: str) -> float:
    """Map a metric value onto [0, 1]; negative MSE becomes 1 + value."""
    v = 1.0 + performance if metric_name == "neg_mse" else performance
    return float(min(1.0, max(0.0, v)))


def default_scorer(kind: str, similarity: float, performance: float, metric_name: str) -> float:
    return similarity * utility(performance, metric_name)


def similarity_weight(distance: float, tau: float) -> float:
    return math.exp(-(distance / tau))


def default_tau(embeddings: list[np.ndarray]) -> float:
    """Median pairwise distance among stored dataset means (1.0 when undefined)."""
    if len(embeddings) < 2:
        return 1.0
    pts = np.asarray(embeddings, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    iu = np.triu_indices(len(pts), k=1)
    med = float(np.median(dist[iu]))
    return med if med > 0 else 1.0


def best_known(rec: DatasetRecord, metric_name: str) -> Optional[dict]:
    perf = [p for p in rec.known_performances if p["metric_name"] == metric_name]
    if not perf:
        return None
    return min(perf, key=lambda p: (-p["value"], p["model_id"]))


def _model_plans(rec: DatasetRecord, weight: float, task: TaskSpec, cfg: StrategyConfig, scorer: Scorer,
                 fingerprint_based: bool, how: str) -> list[StrategyPlan]:
    best = best_known(rec, task.metric_name)
    if best is None:
        return []
    out = []
    for kind in ("reuse", "fine_tune"):
        s = scorer(kind, weight, best["value"], task.metric_name)
        out.append(StrategyPlan(
            kind=kind,
            estimated_cost=cfg.cost(kind),
            score=float(s),
            rationale=f"{kind} {best['model_id']} ({task.metric_name}={best['value']:.4g} on {rec.key}, {how})",
            fingerprint_based=fingerprint_based,
            source_model=best["model_id"],
            source_datasets=[rec.key],
            similarity=weight,
        ))
    return out


def _retrain(cfg: StrategyConfig, fingerprint_based: bool) -> StrategyPlan:
    return StrategyPlan("retrain", cfg.full_epochs, cfg.retrain_prior, "train from scratch on the task data",
                        fingerprint_based)


def _finish(cands: list[StrategyPlan], k: int) -> list[StrategyPlan]:
    cands.sort(key=plan_key)
    seen, out = set(), []
    for p in cands:
        ident = (p.kind, p.source_model, tuple(p.source_datasets) if p.kind == "dataset_conception" else ())
        if ident in seen:
            continue
        seen.add(ident)
        out.append(p)
    return out[:k]


def conception_pool(task: TaskSpec, task_rec: DatasetRecord, others: list[DatasetRecord]) -> int:
    """How many stored images of the task's classes (any image for reconstruction) are available."""
    total = 0
    wanted = set(task_rec.class_labels)
    for rec in others:
        for counts in rec.class_distribution.values():
            total += sum(c for name, c in counts.items() if task.task_kind != "classification" or name in wanted)
    return total


def rank_strategies(
    task: TaskSpec,
    datasets: DatasetStore,
    k: int,
    use_fingerprints: bool = True,
    config: Optional[StrategyConfig] = None,
    scorer: Optional[Scorer] = None,
) -> list[StrategyPlan]:
    """Top-``k`` plans for ``task`` ranked from latent similarity and known performance."""
    if not use_fingerprints:
        return rank_strategies_metadata_only(task, datasets, k, config, scorer)
    if k < 1:
        raise ValidationError("k must be >= 1")
    cfg = config or StrategyConfig()
    scorer = scorer or default_scorer
    task_rec = datasets.get(task.dataset_id, task.version)
    query = task_rec.embedding
    if query is None:
        raise ValidationError(f"{task_rec.key} has no fingerprints; fingerprint it or use metadata-only ranking")
    comparable = [r for r in datasets.list() if r.embedder_version == query.embedder_version]
    tau = cfg.tau if cfg.tau is not None else default_tau([r.fingerprint_ref["embedding"]["mean_vector"]
                                                           for r in comparable])
    if tau <= 0:
        raise ValidationError("tau must be positive")

    cands = [_retrain(cfg, True)]
    for rec, d in datasets.nearest_datasets(query, cfg.neighbours):
        cands += _model_plans(rec, similarity_weight(d, tau), task, cfg, scorer, True, f"distance {d:.4g}")

    others = [r for r in comparable if r.dataset_id != task.dataset_id]
    latest_others = {r.dataset_id: r for r in others}  # list() is sorted, so the last version wins
    pool = conception_pool(task, task_rec, list(latest_others.values()))
    if pool >= cfg.conception_min_pool and latest_others:
        near = datasets.nearest_datasets(query, cfg.neighbours, latest_only=True, exclude=[task.dataset_id])
        if near:
            mean_w = float(np.mean([similarity_weight(d, tau) for _, d in near]))
            cands.append(StrategyPlan(
                kind="dataset_conception",
                estimated_cost=cfg.full_epochs,
                score=min(1.0, cfg.retrain_prior * (1.0 + mean_w)),
                rationale=f"pool {pool} nearby images from {len(near)} datasets into the training set",
                fingerprint_based=True,
                source_datasets=[r.key for r, _ in near],
                similarity=mean_w,
            ))
    return _finish(cands, k)


def _distribution(rec: DatasetRecord) -> dict[str, Fraction]:
    totals: dict[str, int] = {}
    for counts in rec.class_distribution.values():
        for name, c in counts.items():
            totals[name] = totals.get(name, 0) + int(c)
    n = sum(totals.values())
    return {name: Fraction(c, n) for name, c in totals.items()} if n else {}


def _affinity_exact(a: DatasetRecord, b: DatasetRecord) -> Fraction:
    # Rational arithmetic keeps mathematically equal affinities equal, so the
    # (version, id) tie-break decides and float rounding never does.
    kind = Fraction(int(a.task_kind == b.task_kind))
    sa, sb = set(a.class_labels), set(b.class_labels)
    jac = Fraction(len(sa & sb), len(sa | sb)) if sa | sb else Fraction(1)
    pa, pb = _distribution(a), _distribution(b)
    if pa and pb:
        tv = sum((abs(pa.get(c, 0) - pb.get(c, 0)) for c in set(pa) | set(pb)), Fraction(0)) / 2
    else:
        tv = Fraction(0 if pa == pb else 1)
    return (kind + jac + 1 - tv) / 3


def metadata_affinity(a: DatasetRecord, b: DatasetRecord) -> float:
    """Mean of task-kind match, class-set Jaccard and 1 - total variation; lies in [0, 1]."""
    return float(_affinity_exact(a, b))


def rank_strategies_metadata_only(
    task: TaskSpec,
    datasets: DatasetStore,
    k: int,
    config: Optional[StrategyConfig] = None,
    scorer: Optional[Scorer] = None,
) -> list[StrategyPlan]:
    """Same candidates as the latent ranking, with metadata affinity in place of similarity."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    cfg = config or StrategyConfig()
    scorer = scorer or default_scorer
    task_rec = datasets.get(task.dataset_id, task.version)
    scored = [(rec, _affinity_exact(task_rec, rec)) for rec in datasets.list()]
    scored.sort(key=lambda t: (-t[1], t[0].version, t[0].dataset_id))
    cands = [_retrain(cfg, False)]
    for rec, exact in scored[: cfg.neighbours]:
        aff = float(exact)
        cands += _model_plans(rec, aff, task, cfg, scorer, False, f"metadata affinity {aff:.4g}")
    return _finish(cands, k)


def conceive_dataset(
    task: TaskSpec,
    datasets: DatasetStore,
    n: int,
    stratify: bool = False,
    name: Optional[str] = None,
    sources: Optional[list[str]] = None,
) -> DatasetRecord:
    """Register the ``n`` stored images nearest to the task dataset as a new dataset.

    Classification tasks keep only images whose class name exists in the task
    dataset and relabel them by name; everything lands in the train split.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    task_rec = datasets.get(task.dataset_id, task.version)
    query = task_rec.embedding
    if query is None:
        raise ValidationError(f"{task_rec.key} has no fingerprints")
    classes = task_rec.class_labels if task.task_kind == "classification" else None
    exclude = [task.dataset_id]
    if sources is not None:
        keep = {s.split("@")[0] for s in sources}
        exclude += [r.dataset_id for r in datasets.list(latest_only=True) if r.dataset_id not in keep]
    refs = datasets.nearest_images(query, n, stratify=stratify, latest_only=True, exclude=exclude, classes=classes)
    if not refs:
        raise NotFoundError("no stored images are close enough to conceive a dataset")
    pixels, names = datasets.gather_images(refs)
    if classes is not None:
        index = {c: i for i, c in enumerate(classes)}
        labels = np.array([index[c] for c in names])
        out_classes = list(classes)
    else:
        labels = np.zeros(len(refs), dtype=np.int64)
        out_classes = [UNLABELED]
    counts: dict[str, int] = {}
    for r in refs:
        key = f"{r.dataset_id}@v{r.version}"
        counts[key] = counts.get(key, 0) + 1
    note = "conceived from " + ", ".join(f"{k} ({c} images)" for k, c in sorted(counts.items()))
    name = name or f"{task.task_id}-conceived"
    container = ImageContainer(name, pixels, labels, {"train": (0, len(refs))}, out_classes)
    return datasets.register(container, name, task.task_kind, source_note=note)
