"""Request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ErrorPayload(BaseModel):
    error_class: str
    message: str


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class InitRequest(BaseModel):
    dir: str


class InitResponse(BaseModel):
    created: list[str]


class SplitRequest(BaseModel):
    input: str
    task: str
    train_count: int
    seed: int = 0
    out_train: str
    out_test: str


class SplitResponse(BaseModel):
    total: int
    train_count: int
    test_count: int
    split_ratio: float


class StatsRequest(BaseModel):
    paths: list[str]


class StatsRow(BaseModel):
    name: str
    count: int
    min: int
    max: int
    mean: float
    std: float


class StatsResponse(BaseModel):
    rows: list[StatsRow]


class SynthRequest(BaseModel):
    config: str
    seeds: str
    target: int
    cycle: int = 1
    out: str


class SynthResponse(BaseModel):
    produced: int
    requested: int
    calls_made: int
    failed_calls: int
    parse_skipped: int
    complete: bool
    out: str


class CurateRequest(BaseModel):
    config: str
    candidates: str
    pool: list[str] = Field(default_factory=list)
    test: str
    out: str
    report_out: str | None = None


class CurateResponse(BaseModel):
    input_count: int
    survivors: int
    dedup_removed: int
    quality_removed: int
    decontam_removed: int
    by_reason: dict[str, int]
    out: str


class TrainRequest(BaseModel):
    config: str
    refs: list[str]
    cycle: int = 0
    base_dir: str = "."
    output_dir: str


class TrainResponse(BaseModel):
    handle_id: str
    base_model: str
    cycle: int
    artifact_uri: str
    final_loss: float
    steps: int
    lora_rank: int | None
    lora_alpha: int | None


class InferRequest(BaseModel):
    config: str
    model_result: str
    test: str
    k: int | None = None
    base_dir: str = "."
    out: str


class InferResponse(BaseModel):
    records: int
    out: str


class JudgeRequest(BaseModel):
    config: str
    generations: str
    test: str
    out_verdicts: str | None = None
    out_summary: str | None = None


class MetricCells(BaseModel):
    mean_score: float
    coverage: dict[str, float]


class JudgeResponse(BaseModel):
    verdicts: int
    judge_calls: int
    metrics: dict[str, MetricCells]


class RunRequest(BaseModel):
    config: str
    run_dir: str
    seed: int | None = None
    dry_run: bool = False


class PlanRow(BaseModel):
    t: int
    volume: int
    cumulative_training: int
    lora_rank: int
    lora_alpha: int


class RunResponse(BaseModel):
    run_id: str
    t: int
    decision: str | None
    volumes: dict[str, int]
    history: list[dict]
    metrics: dict[str, MetricCells] | None = None


class PlanResponse(BaseModel):
    rows: list[PlanRow]


class ResumeRequest(BaseModel):
    run_dir: str


class ReportRequest(BaseModel):
    run_dir: str


class CycleReportRow(BaseModel):
    t: int
    volume: int = 0
    cumulative_training: int = 0
    decision: str
    metrics: dict[str, MetricCells] = Field(default_factory=dict)


class ReportResponse(BaseModel):
    run_id: str
    decision: str | None
    rows: list[CycleReportRow]


class CostRequest(BaseModel):
    sheet: str = "default"
    months: int = 12
    out_dir: str | None = None


class CostResponse(BaseModel):
    table: str
    break_even: dict[str, float | None]
    files: dict[str, str] = Field(default_factory=dict)
