"""HTTP service exposing the estimation toolkit.

The CLI talks to this app in-process by default; the same app can be served
over the network with any ASGI server.
"""

import numpy as np
from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from .. import harness, model as model_mod, stability
from ..errors import (
    ConfigError,
    DimensionError,
    EstnetError,
    GainInfeasible,
    InfeasibleBeta,
    ParameterError,
    ShapeError,
    SolverError,
)
from . import schemas

app = FastAPI(title="estnet", version=__version__)

_CONFIG_ERRORS = (ConfigError, ParameterError, DimensionError, ShapeError, ValueError)
_INFEASIBLE_ERRORS = (InfeasibleBeta, GainInfeasible)


def _error(kind, message, status=400):
    body = schemas.ErrorResponse(error=schemas.ErrorBody(kind=kind, message=message))
    return JSONResponse(status_code=status, content=body.model_dump())


@app.exception_handler(EstnetError)
async def _estnet_error(request, exc):
    if isinstance(exc, _INFEASIBLE_ERRORS):
        return _error("infeasible", str(exc), status=409)
    if isinstance(exc, SolverError):
        return _error("solver", str(exc), status=502)
    if isinstance(exc, _CONFIG_ERRORS):
        return _error("config", str(exc), status=400)
    return _error("internal", str(exc), status=500)


@app.exception_handler(ValueError)
async def _value_error(request, exc):
    return _error("config", str(exc), status=400)


@app.exception_handler(RequestValidationError)
async def _validation_error(request, exc):
    return _error("config", str(exc.errors()), status=422)


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/example")
def example(req: schemas.ExampleRequest):
    return model_mod.model_to_json(model_mod.example_system(req.g))


@app.post("/beta", response_model=schemas.BetaResponse)
def beta(req: schemas.BetaRequest):
    model = model_mod.load_model(req.config)
    bounds = model_mod.compute_bounds(model)
    assignment = stability.compute_beta(model, req.lam, rho=req.rho, bounds=bounds)
    rows = [
        schemas.BetaRow(subsystem=i + 1, alpha=bounds.alpha[i], beta=assignment.beta[i])
        for i in range(model.l)
    ]
    return schemas.BetaResponse(rows=rows)


def _gains_by_step(model, entries):
    per_step = {}
    for e in entries:
        i = e.subsystem - 1
        if not 0 <= i < model.l:
            raise ConfigError(f"gain entry references unknown subsystem {e.subsystem}")
        s = model.subsystems[i]
        if not (1 <= e.row <= s.n and 1 <= e.col <= s.m):
            raise ConfigError(
                f"gain entry ({e.k},{e.subsystem},{e.row},{e.col}) out of range"
            )
        step = per_step.setdefault(e.k, {})
        K = step.setdefault(i, np.zeros((s.n, s.m)))
        K[e.row - 1, e.col - 1] = e.value
    if not per_step:
        raise ConfigError("no gain entries supplied")
    return per_step


@app.post("/check", response_model=schemas.CheckResponse)
def check(req: schemas.CheckRequest):
    model = model_mod.load_model(req.config)
    params = stability.StabilityParams(lam=req.lam, eta=req.eta)
    per_step = _gains_by_step(model, req.gains)
    steps = []
    for k in sorted(per_step):
        if k < 1:
            raise ConfigError("gain steps must start at 1")
        gains = per_step[k]
        if sorted(gains) != list(range(model.l)):
            raise ConfigError(f"step {k} is missing gains for some subsystems")
        eps = stability.epsilon_feasible(model, k)
        rep = stability.check_distributed(k, gains, model, params, eps)
        central = stability.centralized_condition(k, gains, model, req.lam, req.eta)
        steps.append(
            schemas.StepVerdict(
                k=k,
                subsystems=[
                    schemas.SubsystemVerdict(
                        subsystem=i + 1,
                        contraction=rep.c1[i]["contraction"],
                        gain_norm=rep.c1[i]["gain"],
                        ok=rep.c1[i]["ok"],
                    )
                    for i in range(model.l)
                ],
                pairs=[
                    schemas.PairVerdict(
                        pair=(i + 1, j + 1),
                        max_eigenvalue=v["max_eig"],
                        ok=v["ok"],
                    )
                    for (i, j), v in sorted(rep.pairs.items())
                ],
                centralized_ok=bool(central),
                passed=rep.passed,
            )
        )
    return schemas.CheckResponse(steps=steps, passed=all(s.passed for s in steps))


def _config_from(req, model, runs=1):
    return harness.SimulationConfig(
        model=model,
        horizon=req.horizon,
        runs=runs,
        base_seed=req.seed,
        mode=req.mode,
        lam=req.lam,
        eta=req.eta,
        rho=req.rho,
        p0=req.p0,
    )


def _gain_entries(gains_per_step):
    out = []
    for step, row in enumerate(gains_per_step, start=1):
        for i in sorted(row):
            K = np.atleast_2d(row[i])
            for r in range(K.shape[0]):
                for c in range(K.shape[1]):
                    out.append(
                        schemas.GainEntry(
                            k=step, subsystem=i + 1, row=r + 1, col=c + 1,
                            value=float(K[r, c]),
                        )
                    )
    return out


@app.post("/simulate", response_model=schemas.SimulateResponse)
def simulate(req: schemas.SimulateRequest):
    model = model_mod.load_model(req.config)
    config = _config_from(req, model)
    result = harness.run(config)
    trace_rows = []
    for k in range(result.trace.horizon + 1):
        for i in range(model.l):
            for c in range(model.subsystems[i].n):
                trace_rows.append(
                    schemas.TraceRow(
                        k=k, subsystem=i + 1, component=c + 1,
                        x=float(result.trace.x[k][i][c]),
                        xhat=float(result.trace.xhat[k][i][c]),
                    )
                )
    return schemas.SimulateResponse(
        trace=trace_rows,
        gains=_gain_entries(result.schedule.gains),
        report=[
            schemas.GainDesignReport(**row)
            for row in harness.run_report_json(result.reports)
        ],
        beta=list(result.beta.beta) if result.beta is not None else None,
    )


@app.post("/mc", response_model=schemas.McResponse)
def mc(req: schemas.McRequest):
    model = model_mod.load_model(req.config)
    config = _config_from(req, model, runs=req.runs)
    report, _ = harness.monte_carlo(config)
    return schemas.McResponse(
        mse=[schemas.MseRow(k=k, mse=v) for k, v in enumerate(report.mse)],
        amse=report.amse,
    )


@app.post("/sweep-g", response_model=schemas.SweepResponse)
def sweep(req: schemas.SweepRequest):
    rows = harness.sweep_g(
        req.g, runs=req.runs, horizon=req.horizon, base_seed=req.seed,
        mode=req.mode, lam=req.lam, eta=req.eta, rho=req.rho, p0=req.p0,
    )
    return schemas.SweepResponse(
        rows=[schemas.SweepRow(g=r.g, amse=r.amse, beta=r.beta) for r in rows]
    )
