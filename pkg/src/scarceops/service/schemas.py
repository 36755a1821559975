"""Request and response bodies of the HTTP API."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ErrorDetail(BaseModel):
    code: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorDetail


class Health(BaseModel):
    status: Literal["ok"] = "ok"
    version: str
    embedder_version: Optional[str]
    datasets: int
    tasks: int


class DatasetOut(BaseModel):
    dataset_id: str
    version: int
    name: str
    task_kind: str
    class_labels: list[str]
    class_distribution: dict[str, dict[str, int]]
    split_index: dict[str, list[int]]
    image_count: int
    content_hash: str
    created_at: str
    source_note: str
    embedder_version: Optional[str]
    known_performances: list[dict[str, Any]]

    @classmethod
    def of(cls, rec) -> "DatasetOut":
        d = rec.to_dict()
        return cls(embedder_version=rec.embedder_version, **{k: d[k] for k in cls.model_fields if k in d})


class Neighbour(BaseModel):
    dataset_id: str
    version: int
    distance: float


class TaskCreate(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset_id: str
    version: Optional[int] = Field(None, ge=1)
    metric: str = "accuracy"
    task_kind: Optional[str] = None


class TaskOut(BaseModel):
    task_id: str
    dataset_id: str
    version: int
    metric_name: str
    task_kind: str
    current_best_metric: Optional[float]
    best_model_id: Optional[str]
    created_at: str


class DevelopRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(1, ge=1, le=64)
    trials: int = Field(8, ge=1, le=256)
    seed: int = 0
    preset: str = "tiny"
    epochs: Optional[dict[str, int]] = None
    batch_size: Optional[list[int]] = None
    use_fingerprints: Optional[bool] = None


class PlanOutcome(BaseModel):
    kind: str
    score: float
    estimated_cost: float
    source_model: Optional[str]
    source_datasets: list[str]
    run_ids: list[str]
    best_metric: Optional[float]
    failures: dict[str, str]


class DevelopOut(BaseModel):
    task_id: str
    best_model_id: str
    metric_value: float
    A_t: Optional[float] = Field(description="the task's best metric after this call")
    run_ids: list[str]
    outcomes: list[PlanOutcome]


class DeployRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model_id: Optional[str] = None


class DeploymentOut(BaseModel):
    deployment_id: str
    task_id: str
    model_id: str
    embedder_version: str
    deployed_at: str
    status: str


class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image: Optional[Any] = Field(None, description="nested list: [32,32], [32,32,3] or [3,32,32]")
    npy_b64: Optional[str] = Field(None, description="base64 of an .npy file holding one image")

    @model_validator(mode="after")
    def _one(self) -> "PredictRequest":
        if (self.image is None) == (self.npy_b64 is None):
            raise ValueError("give exactly one of image or npy_b64")
        return self


class PredictOut(BaseModel):
    image_id: str
    model_id: str
    prediction: Optional[int]
    scores: Optional[list[float]] = None
    reconstruction_error: Optional[float] = None
    fingerprint: list[float]


class FeedbackRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: Optional[str] = None
    image: Optional[Any] = None
    label: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _one(self) -> "FeedbackRequest":
        if (self.image_id is None) == (self.image is None):
            raise ValueError("give exactly one of image_id or image")
        return self


class AlertOut(BaseModel):
    kind: str
    task_id: str
    value: float
    threshold: float
    window_size: int
    feedback_count: int
    raised_at: str


class CTCycleOut(BaseModel):
    cycle_id: str
    task_id: str
    status: str
    coalesced: int
    queued_at: str
    finished_at: Optional[str]
    dataset: Optional[str]
    A_before: Optional[float]
    A_after: Optional[float]
    model_before: Optional[str]
    model_after: Optional[str]
    run_ids: list[str]
    error: Optional[str]
    alert: dict[str, Any]


class FeedbackOut(BaseModel):
    A_t: Optional[float]
    window_size: int
    feedback_count: int
    alerts: list[AlertOut]
    ct: list[CTCycleOut]


class MetricPointOut(BaseModel):
    timestamp: str
    value: Optional[float]
    window_size: int
    feedback_count: int


class CTStatus(BaseModel):
    in_flight: bool
    cycles: list[CTCycleOut]
