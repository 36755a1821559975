"""Execution of strategy plans: seeded random search, training, run recording."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..datasets.store import DatasetStore
from ..errors import NoModelError, ValidationError
from ..models.networks import (
    FitConfig,
    TrialFailure,
    build_network,
    compatible,
    descriptor_for,
    encode_network,
    evaluate,
    evaluation_split,
    fit,
    network_from_checkpoint,
    warm_start,
)
from ..models.store import ModelRecord, ModelStore, RunRecord, choose_best
from ..strategy.plans import StrategyConfig, StrategyPlan, conceive_dataset, rank_strategies
from ..strategy.tasks import TaskSpec, TaskStore
from ..tensor import make_rng

logger = logging.getLogger(__name__)


@dataclass
class SearchSpace:
    learning_rate: tuple[float, float] = (1e-4, 1e-2)
    batch_size: tuple[int, ...] = (16, 32, 64)
    trials: int = 8
    seed: int = 0
    epochs: dict = field(default_factory=lambda: {"fine_tune": 5, "retrain": 30, "dataset_conception": 30})
    preset: str = "tiny"
    workers: int = 1

    def __post_init__(self) -> None:
        lo, hi = self.learning_rate
        if not (0 < lo <= hi):
            raise ValidationError("learning_rate range must satisfy 0 < low <= high")
        if not self.batch_size or min(self.batch_size) < 1:
            raise ValidationError("batch_size choices must be non-empty positive integers")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if any(v < 1 for v in self.epochs.values()):
            raise ValidationError("epochs must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def sample(self) -> list[dict]:
        """Hyperparameters for every trial; a pure function of the space."""
        rng = make_rng(self.seed)
        lo, hi = (math.log10(v) for v in self.learning_rate)
        out = []
        for i in range(self.trials):
            lr = float(10 ** rng.uniform(lo, hi))
            bs = int(self.batch_size[int(rng.integers(len(self.batch_size)))])
            out.append({"learning_rate": lr, "batch_size": bs, "seed": self.seed + i})
        return out

    def to_dict(self) -> dict:
        return {
            "learning_rate": list(self.learning_rate),
            "batch_size": list(self.batch_size),
            "trials": self.trials,
            "seed": self.seed,
            "epochs": dict(self.epochs),
            "preset": self.preset,
        }


@dataclass
class DevelopmentOutcome:
    plan: StrategyPlan
    run_ids: list[str]
    best: Optional[RunRecord]
    wall_time: float
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "run_ids": list(self.run_ids),
            "best_run_id": self.best.run_id if self.best else None,
            "best_metric": self.best.metric_value if self.best else None,
            "wall_time": self.wall_time,
            "failures": dict(self.failures),
        }


@dataclass
class DevelopResult:
    model: ModelRecord
    metric_value: float
    outcomes: list[DevelopmentOutcome]

    @property
    def run_ids(self) -> list[str]:
        return [r for o in self.outcomes for r in o.run_ids]


class _TaskData:
    """Task images split into training and held-out evaluation parts."""

    def __init__(self, task: TaskSpec, datasets: DatasetStore):
        c = datasets.load_container(task.dataset_id, task.version)
        self.classes = list(c.classes)
        self.eval_split = evaluation_split(c.splits)
        ev = c.split_slice(self.eval_split)
        self.eval_x, self.eval_y = c.images(self.eval_split), c.labels[ev].astype(np.int64)
        tr = c.split_slice("train")
        self.train_x, self.train_y = c.images("train"), c.labels[tr].astype(np.int64)


class Developer:
    """Runs plans against the stores and keeps the task's best metric up to date."""

    def __init__(self, datasets: DatasetStore, models: ModelStore, tasks: TaskStore,
                 strategy: Optional[StrategyConfig] = None,
                 on_epoch: Optional[Callable[[str, int, float], None]] = None):
        self.datasets = datasets
        self.models = models
        self.tasks = tasks
        self.strategy = strategy or StrategyConfig()
        self.on_epoch = on_epoch

    # -- run bookkeeping

    def _open_run(self, task: TaskSpec, plan: StrategyPlan, hp: dict, trial: int, epochs: int) -> RunRecord:
        run = RunRecord(task_id=task.task_id, metric_name=task.metric_name, strategy_plan=plan.to_dict(),
                        hyperparameters=dict(hp), epochs=epochs, trial_index=trial)
        self.models.record_run(run)
        run.status = "running"
        self.models.record_run(run)
        return run

    def _fail(self, run: RunRecord, reason: str) -> RunRecord:
        run.status, run.failure_reason = "failed", reason or "unknown failure"
        self.models.record_run(run)
        logger.info("run %s failed: %s", run.run_id, reason)
        return run

    def _succeed(self, run: RunRecord, value: float, digest: str, model_id: str) -> RunRecord:
        run.status, run.metric_value, run.checkpoint_hash, run.model_id = "succeeded", float(value), digest, model_id
        self.models.record_run(run)
        return run

    # -- single trials

    def _reuse(self, task: TaskSpec, plan: StrategyPlan, data: _TaskData) -> RunRecord:
        run = self._open_run(task, plan, {}, 0, 0)
        try:
            src = self.models.get_model(plan.source_model)
            why = compatible(src.architecture, task.task_kind, len(data.classes))
            if why:
                raise TrialFailure(why)
            model = network_from_checkpoint(self.models.load_checkpoint(src.checkpoint_hash))
            value = evaluate(model, task.metric_name, task.task_kind, data.eval_x, data.eval_y)
            if not math.isfinite(value):
                raise TrialFailure("metric is not finite")
        except Exception as exc:  # every failure becomes a recorded run
            return self._fail(run, f"{type(exc).__name__}: {exc}")
        return self._succeed(run, value, src.checkpoint_hash, src.model_id)

    def _train_trial(self, task: TaskSpec, plan: StrategyPlan, data: _TaskData, hp: dict, trial: int,
                     epochs: int, preset: str, extra: Optional[tuple[np.ndarray, np.ndarray]],
                     setup_error: Optional[str]) -> RunRecord:
        run = self._open_run(task, plan, {**hp, "epochs": epochs}, trial, epochs)
        if setup_error:
            return self._fail(run, setup_error)
        try:
            if plan.kind == "fine_tune":
                src = self.models.get_model(plan.source_model)
                ck = self.models.load_checkpoint(src.checkpoint_hash)
                desc = descriptor_for(task.task_kind, src.architecture["preset"], len(data.classes))
                model = build_network(desc, seed=hp["seed"])
                warm_start(model, desc, ck)
            else:
                desc = descriptor_for(task.task_kind, preset, len(data.classes))
                model = build_network(desc, seed=hp["seed"])
            x, y = data.train_x, data.train_y
            if extra is not None and len(extra[0]):
                x, y = np.concatenate([x, extra[0]]), np.concatenate([y, extra[1]])
            hook = (lambda e, loss: self.on_epoch(run.run_id, e, loss)) if self.on_epoch else None
            run.loss_history = fit(model, x, y if task.task_kind == "classification" else None,
                                   FitConfig(epochs, hp["learning_rate"], hp["batch_size"], hp["seed"]), hook)
            value = evaluate(model, task.metric_name, task.task_kind, data.eval_x, data.eval_y)
            if not math.isfinite(value):
                raise TrialFailure("metric is not finite")
            blob, _ = encode_network(model, desc)
            digest = self.models.put_checkpoint(blob)
            rec = self.models.register_model(desc, digest, run.run_id, task.task_id)
        except Exception as exc:
            return self._fail(run, f"{type(exc).__name__}: {exc}")
        return self._succeed(run, value, digest, rec.model_id)

    # -- public API

    def execute(self, plan: StrategyPlan, task: TaskSpec, space: Optional[SearchSpace] = None) -> DevelopmentOutcome:
        space = space or SearchSpace()
        t0 = time.perf_counter()
        data = _TaskData(task, self.datasets)
        if plan.kind == "reuse":
            runs = [self._reuse(task, plan, data)]
        else:
            extra, setup_error = None, None
            if plan.kind == "dataset_conception":
                try:
                    extra = self._conceived(task, plan, data)
                except Exception as exc:
                    setup_error = f"dataset conception failed: {type(exc).__name__}: {exc}"
            epochs = int(space.epochs.get(plan.kind, space.epochs.get("retrain", 30)))
            jobs = list(enumerate(space.sample()))
            work = lambda job: self._train_trial(task, plan, data, job[1], job[0], epochs, space.preset, extra,
                                                  setup_error)
            if space.workers > 1:
                with ThreadPoolExecutor(space.workers) as pool:
                    runs = list(pool.map(work, jobs))
            else:
                runs = [work(job) for job in jobs]
        runs.sort(key=lambda r: r.trial_index)
        ok = [r for r in runs if r.status == "succeeded"]
        best = min(ok, key=lambda r: (-r.metric_value, r.epochs, r.trial_index)) if ok else None
        if best is not None:
            self.datasets.add_known_performance(task.dataset_id, task.version, best.model_id,
                                                task.metric_name, best.metric_value)
            self.models.add_performance(best.model_id, task.dataset_id, task.version, task.metric_name,
                                        best.metric_value)
        return DevelopmentOutcome(
            plan=plan,
            run_ids=[r.run_id for r in runs],
            best=best,
            wall_time=time.perf_counter() - t0,
            failures={r.run_id: r.failure_reason for r in runs if r.status == "failed"},
        )

    def _conceived(self, task: TaskSpec, plan: StrategyPlan, data: _TaskData) -> tuple[np.ndarray, np.ndarray]:
        n = self.strategy.conception_size or max(self.strategy.conception_min_pool, len(data.train_x))
        rec = conceive_dataset(task, self.datasets, n, stratify=True, sources=plan.source_datasets)
        c = self.datasets.load_container(rec.dataset_id, rec.version)
        if task.task_kind == "classification" and c.classes != data.classes:
            raise TrialFailure("conceived classes do not match the task")
        return c.images(), c.labels.astype(np.int64)

    def plans(self, task: TaskSpec, k: int, use_fingerprints: Optional[bool] = None) -> list[StrategyPlan]:
        if use_fingerprints is None:
            use_fingerprints = self.datasets.get(task.dataset_id, task.version).embedding is not None
        return rank_strategies(task, self.datasets, k, use_fingerprints, self.strategy)

    def develop(self, task_id: str, k: int = 1, space: Optional[SearchSpace] = None,
                use_fingerprints: Optional[bool] = None) -> DevelopResult:
        """Rank, execute the top ``k`` plans, then pick m* over every run of the task."""
        task = self.tasks.get(task_id)
        plans = self.plans(task, k, use_fingerprints)
        outcomes = [self.execute(plan, task, space) for plan in plans]
        try:
            best = choose_best(self.models.runs(task_id), task_id)
        except NoModelError:
            reasons = "; ".join(f"{rid}: {why}" for o in outcomes for rid, why in o.failures.items())
            raise NoModelError(f"every run failed for {task_id} (A_t stays -inf): {reasons}") from None
        model = self.models.get_model(best.model_id)
        updated = self.tasks.record_best(task_id, best.metric_value, model.model_id)
        return DevelopResult(model, updated.current_best_metric, outcomes)

