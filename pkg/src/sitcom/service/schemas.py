"""Request and response models for the HTTP service."""

from __future__ import annotations

import enum
from typing import Optional

from pydantic import BaseModel, Field

from sitcom.harness import ExperimentConfig


class Health(BaseModel):
    status: str = "ok"
    version: str


class LayoutInfo(BaseModel):
    id: str
    s_opt: int
    start: tuple[int, int]
    goal_candidates: list[tuple[int, int]]
    text: str


class MetricRow(BaseModel):
    M_t: float
    M_o: float
    M_s: float


class OracleRow(MetricRow):
    condition: str
    episodes: int


class OracleReport(BaseModel):
    layout: str
    rows: list[OracleRow]


class TrainRequest(BaseModel):
    config: ExperimentConfig = ExperimentConfig()
    name: Optional[str] = Field(None, pattern=r"^[A-Za-z0-9_.-]+$")


class RunState(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"


class RunStatus(BaseModel):
    id: str
    state: RunState
    out_dir: str
    config_hash: str
    finals: Optional[dict[str, float]] = None
    error: Optional[str] = None


class EvalRequest(BaseModel):
    checkpoint: str
    episodes: int = Field(100, ge=1)
    seed: Optional[int] = None


class EvalResult(MetricRow):
    checkpoint: str
    episodes: int
    config_hash: str
