"""Request/response models for the HTTP service."""

from typing import Any, Optional

from pydantic import BaseModel, Field


class ErrorBody(BaseModel):
    kind: str  # config | infeasible | solver | internal
    message: str


class ErrorResponse(BaseModel):
    error: ErrorBody


class ExampleRequest(BaseModel):
    g: float = Field(ge=0.0)


class ModelDocument(BaseModel):
    model_config = {"extra": "allow"}
    subsystems: list
    couplings: list = []


class BetaRequest(BaseModel):
    config: dict
    lam: float = Field(alias="lambda", gt=0.0, lt=1.0)
    rho: float = Field(default=0.9, gt=0.0, lt=1.0)

    model_config = {"populate_by_name": True}


class BetaRow(BaseModel):
    subsystem: int
    alpha: float
    beta: float


class BetaResponse(BaseModel):
    rows: list[BetaRow]


class GainEntry(BaseModel):
    k: int
    subsystem: int
    row: int
    col: int
    value: float


class CheckRequest(BaseModel):
    config: dict
    gains: list[GainEntry]
    lam: float = Field(alias="lambda", gt=0.0, lt=1.0)
    eta: float = Field(gt=0.0)

    model_config = {"populate_by_name": True}


class SubsystemVerdict(BaseModel):
    subsystem: int
    contraction: float
    gain_norm: float
    ok: bool


class PairVerdict(BaseModel):
    pair: tuple[int, int]
    max_eigenvalue: float
    ok: bool


class StepVerdict(BaseModel):
    k: int
    subsystems: list[SubsystemVerdict]
    pairs: list[PairVerdict]
    centralized_ok: bool
    passed: bool


class CheckResponse(BaseModel):
    steps: list[StepVerdict]
    passed: bool


class SimulateRequest(BaseModel):
    config: dict
    horizon: int = Field(default=100, ge=1)
    seed: int = 0
    mode: str = "delayed"
    lam: float = Field(default=0.6, alias="lambda")
    eta: float = 100.0
    rho: float = 0.9
    p0: float = 1.0

    model_config = {"populate_by_name": True}


class TraceRow(BaseModel):
    k: int
    subsystem: int
    component: int
    x: float
    xhat: float


class GainDesignReport(BaseModel):
    step: int
    subsystem: int
    mode: str
    solver_status: str
    objective: float
    kc_a_norm: float


class SimulateResponse(BaseModel):
    trace: list[TraceRow]
    gains: list[GainEntry]
    report: list[GainDesignReport]
    beta: Optional[list[float]] = None


class McRequest(SimulateRequest):
    runs: int = Field(default=100, ge=1)


class MseRow(BaseModel):
    k: int
    mse: float


class McResponse(BaseModel):
    mse: list[MseRow]
    amse: float


class SweepRequest(BaseModel):
    g: list[float]
    runs: int = Field(default=100, ge=1)
    horizon: int = Field(default=100, ge=1)
    seed: int = 0
    mode: str = "delayed"
    lam: float = Field(default=0.6, alias="lambda")
    eta: float = 100.0
    rho: float = 0.9
    p0: float = 1.0

    model_config = {"populate_by_name": True}


class SweepRow(BaseModel):
    g: float
    amse: float
    beta: list[float]


class SweepResponse(BaseModel):
    rows: list[SweepRow]


class HealthResponse(BaseModel):
    status: str
    version: Optional[Any] = None
