"""FastAPI application over a store root."""

from __future__ import annotations

import base64
import binascii
import json
import logging
import math
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, File, Form, Query, Request, UploadFile
from fastapi.concurrency import run_in_threadpool
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..automl import SearchSpace
from ..errors import ScarceOpsError, ValidationError
from ..workspace import Workspace
from . import schemas as S
from .monitor import MonitorConfig
from .runtime import CTConfig, ServingRuntime

logger = logging.getLogger(__name__)


def _finite(v: Optional[float]) -> Optional[float]:
    return v if v is not None and math.isfinite(v) else None


def _task_out(t) -> S.TaskOut:
    return S.TaskOut(**t.to_dict())


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def create_app(root: Union[str, Path, Workspace], monitor: Optional[MonitorConfig] = None,
               ct: Optional[CTConfig] = None) -> FastAPI:
    ws = root if isinstance(root, Workspace) else Workspace(root)
    rt = ServingRuntime(ws, monitor, ct)
    app = FastAPI(title="scarceops", version=__version__)
    app.state.workspace, app.state.runtime = ws, rt

    @app.exception_handler(ScarceOpsError)
    async def _domain_error(request: Request, exc: ScarceOpsError):
        return _error(exc.http_status, exc.code, str(exc))

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        parts = []
        for e in exc.errors():
            loc = ".".join(str(p) for p in e.get("loc", ()) if p != "body")
            parts.append(f"{loc}: {e.get('msg')}" if loc else str(e.get("msg")))
        return _error(400, "validation", "; ".join(parts) or "invalid request")

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        logger.exception("unhandled error on %s", request.url.path)
        return _error(500, "internal", f"{type(exc).__name__}: {exc}")

    @app.get("/v1/health", response_model=S.Health)
    def health():
        info = ws.current_embedder_info()
        return S.Health(version=__version__, embedder_version=info.version if info else None,
                        datasets=len(ws.datasets.list(latest_only=True)), tasks=len(ws.tasks.list()))

    # -- datasets

    @app.post("/v1/datasets", response_model=S.DatasetOut, status_code=201)
    def upload_dataset(
        file: UploadFile = File(...),
        name: str = Form(...),
        task_kind: str = Form("classification"),
        resize: bool = Form(False),
        ignore_labels: bool = Form(False),
    ):
        data = file.file.read()
        if not data:
            raise ValidationError("uploaded file is empty")
        rec = ws.import_dataset(data, name, task_kind, resize=resize, ignore_labels=ignore_labels)
        return S.DatasetOut.of(rec)

    @app.get("/v1/datasets", response_model=list[S.DatasetOut])
    def list_datasets(latest_only: bool = False):
        return [S.DatasetOut.of(r) for r in ws.datasets.list(latest_only=latest_only)]

    @app.get("/v1/datasets/{dataset_id}", response_model=S.DatasetOut)
    def get_dataset(dataset_id: str, version: Optional[int] = Query(None, ge=1)):
        return S.DatasetOut.of(ws.datasets.get(dataset_id, version))

    @app.get("/v1/datasets/{dataset_id}/similar", response_model=list[S.Neighbour])
    def similar(dataset_id: str, k: int = Query(5, ge=1, le=1000)):
        return [S.Neighbour(dataset_id=r.dataset_id, version=r.version, distance=d)
                for r, d in ws.similar(dataset_id, k)]

    # -- tasks

    @app.post("/v1/tasks", response_model=S.TaskOut, status_code=201)
    def create_task(body: S.TaskCreate):
        rec = ws.datasets.get(body.dataset_id, body.version)
        return _task_out(ws.create_task(rec.dataset_id, rec.version, body.metric, body.task_kind or rec.task_kind))

    @app.get("/v1/tasks", response_model=list[S.TaskOut])
    def list_tasks():
        return [_task_out(t) for t in ws.tasks.list()]

    @app.get("/v1/tasks/{task_id}", response_model=S.TaskOut)
    def get_task(task_id: str):
        return _task_out(ws.tasks.get(task_id))

    @app.post("/v1/tasks/{task_id}/develop", response_model=S.DevelopOut)
    def develop(task_id: str, body: Optional[S.DevelopRequest] = None):
        body = body or S.DevelopRequest()
        kw = dict(trials=body.trials, seed=body.seed, preset=body.preset)
        if body.epochs is not None:
            kw["epochs"] = {**SearchSpace().epochs, **body.epochs}
        if body.batch_size is not None:
            kw["batch_size"] = tuple(body.batch_size)
        res = ws.develop(task_id, body.k, SearchSpace(**kw), body.use_fingerprints)
        outcomes = [
            S.PlanOutcome(kind=o.plan.kind, score=o.plan.score, estimated_cost=o.plan.estimated_cost,
                          source_model=o.plan.source_model, source_datasets=list(o.plan.source_datasets),
                          run_ids=o.run_ids, best_metric=o.best.metric_value if o.best else None,
                          failures=o.failures)
            for o in res.outcomes
        ]
        return S.DevelopOut(task_id=task_id, best_model_id=res.model.model_id, metric_value=res.metric_value,
                            A_t=_finite(ws.tasks.get(task_id).current_best_metric),
                            run_ids=res.run_ids, outcomes=outcomes)

    @app.post("/v1/tasks/{task_id}/deploy", response_model=S.DeploymentOut)
    def deploy(task_id: str, body: Optional[S.DeployRequest] = None):
        return S.DeploymentOut(**rt.deploy(task_id, body.model_id if body else None).to_dict())

    @app.post("/v1/tasks/{task_id}/predict", response_model=S.PredictOut)
    async def predict(task_id: str, request: Request):
        raw = await request.body()
        if not raw:
            raise ValidationError("empty request body")
        ctype = request.headers.get("content-type", "").split(";")[0].strip()
        if ctype == "application/json":
            try:
                body = S.PredictRequest.model_validate(json.loads(raw))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed JSON: {exc}") from exc
            except ValueError as exc:  # pydantic's ValidationError subclasses ValueError
                raise ValidationError(str(exc)) from exc
            if body.npy_b64 is not None:
                try:
                    image = base64.b64decode(body.npy_b64, validate=True)
                except (binascii.Error, ValueError) as exc:
                    raise ValidationError("npy_b64 is not valid base64") from exc
            else:
                image = body.image
        else:
            image = raw
        return S.PredictOut(**await run_in_threadpool(rt.predict, task_id, image))

    @app.post("/v1/tasks/{task_id}/feedback", response_model=S.FeedbackOut)
    def feedback(task_id: str, body: S.FeedbackRequest):
        out = rt.feedback(task_id, body.label, image_id=body.image_id, image=body.image)
        out["A_t"] = _finite(out["A_t"])
        return S.FeedbackOut(**out)

    @app.get("/v1/tasks/{task_id}/metrics", response_model=list[S.MetricPointOut])
    def metrics(task_id: str):
        return [S.MetricPointOut(**{**p, "value": _finite(p["value"])}) for p in rt.metrics(task_id)]

    @app.get("/v1/tasks/{task_id}/alerts", response_model=list[S.AlertOut])
    def alerts(task_id: str):
        return [S.AlertOut(**a) for a in rt.alerts(task_id)]

    @app.get("/v1/tasks/{task_id}/ct", response_model=S.CTStatus)
    def ct_status(task_id: str):
        ws.tasks.get(task_id)
        return S.CTStatus(in_flight=rt.ct_in_flight(task_id), cycles=[S.CTCycleOut(**c) for c in rt.ct_cycles(task_id)])

    return app
