"""Pydantic request/response models for the REST side of the policy server."""
from typing import List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    sessions: int
    max_sessions: int


class PolicyInfo(BaseModel):
    h_o: int
    h_a: int
    obs_dim: int
    action_dim: int
    objective: str
    relative: bool
    steps: int
    latency: str


class InferRequest(BaseModel):
    obs_stack: List[float] = Field(..., min_length=1)
    seed: Optional[int] = None
    steps: Optional[int] = Field(None, ge=1)


class InferResponse(BaseModel):
    actions: List[List[float]]
    h_a: int
    elapsed_ms: float


class QueueAnalyticsRequest(BaseModel):
    e_ls: float = Field(..., gt=0)
    dt: float = Field(..., gt=0)
    h_a: int = Field(..., gt=0)


class QueueAnalyticsResponse(BaseModel):
    g_min: float
    idle_seq: float
    sawtooth_width: int
