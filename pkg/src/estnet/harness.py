"""Simulation and evaluation harness.

Ground-truth simulation with seeded Gaussian noise, closed-loop estimator
runs, Monte Carlo MSE/AMSE evaluation with gain-schedule reuse, coupling
sweeps, and CSV/JSON emission.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import estimator as est
from . import model as model_mod
from . import stability
from .errors import DimensionError, ParameterError
from .numerics import psd_sqrt


@dataclass
class SimulationConfig:
    model: object
    horizon: int = 100
    runs: int = 1
    base_seed: int = 0
    mode: str = "delayed"
    lam: float = 0.6
    eta: float = 100.0
    rho: float = 0.9
    p0: float = 1.0
    init_policy: str = "zero"  # zero | gaussian
    init_scale: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if self.runs < 1:
            raise ParameterError("runs must be >= 1")
        if self.mode not in ("ideal", "delayed"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.init_policy not in ("zero", "gaussian"):
            raise ParameterError(f"unknown init policy {self.init_policy!r}")

    def params(self):
        return stability.StabilityParams(lam=self.lam, eta=self.eta, mode=self.mode)


@dataclass
class SimulationTrace:
    """One closed-loop run: truth, measurements, estimates, errors."""

    x: list  # k -> list of per-subsystem state vectors, k = 0..horizon
    y: list  # k-1 -> list of per-subsystem measurements, k = 1..horizon
    xhat: list  # k -> list of per-subsystem estimates
    e: list  # k -> list of per-subsystem errors x - xhat

    @property
    def horizon(self):
        return len(self.x) - 1


@dataclass
class MseReport:
    mse: list  # index k = 0..horizon
    amse: float
    max_error_per_run: list = field(default_factory=list)


def _noise_stream(base_seed, run, subsystem, kind):
    return np.random.default_rng([int(base_seed), int(run), int(subsystem), kind])


def simulate_truth(model, horizon, base_seed, run=0, init_policy="zero", init_scale=1.0):
    """Simulate the coupled truth dynamics.

    Returns (states, measurements): states[k][i] for k = 0..horizon and
    measurements[k-1][i] = y_i(k) for k = 1..horizon.  Deterministic per
    (base_seed, run); w, v and the initial state use independent sub-streams
    per subsystem.
    """
    l = model.l
    w_rngs = [_noise_stream(base_seed, run, i, 0) for i in range(l)]
    v_rngs = [_noise_stream(base_seed, run, i, 1) for i in range(l)]
    qw_f = [psd_sqrt(np.atleast_2d(s.Qw)) for s in model.subsystems]
    qv_f = [psd_sqrt(np.atleast_2d(s.Qv)) for s in model.subsystems]

    if init_policy == "gaussian":
        init_rngs = [_noise_stream(base_seed, run, i, 2) for i in range(l)]
        x = [init_scale * init_rngs[i].standard_normal(s.n)
             for i, s in enumerate(model.subsystems)]
    else:
        x = [np.zeros(s.n) for s in model.subsystems]

    states = [[np.array(v) for v in x]]
    measurements = []
    for k in range(1, horizon + 1):
        snap_prev = model_mod.evaluate(model, k - 1)
        nxt = []
        for i in range(l):
            xi = snap_prev.A[i] @ x[i]
            for j in model.omega[i]:
                xi = xi + snap_prev.coupling[(i, j)] @ x[j]
            w = qw_f[i] @ w_rngs[i].standard_normal(qw_f[i].shape[0])
            nxt.append(xi + snap_prev.Gamma[i] @ w)
        x = nxt
        snap = model_mod.evaluate(model, k)
        y_row = []
        for i in range(l):
            v = qv_f[i] @ v_rngs[i].standard_normal(qv_f[i].shape[0])
            y_row.append(snap.C[i] @ x[i] + snap.D[i] @ v)
        states.append([np.array(v) for v in x])
        measurements.append(y_row)
    return states, measurements


@dataclass
class RunResult:
    trace: SimulationTrace
    schedule: est.GainSchedule
    beta: object  # BetaAssignment or None
    reports: list


def prepare_schedule(config, beta=None):
    """Offline design pass shared by `run` and `monte_carlo`."""
    params = config.params()
    if config.mode == "delayed" and beta is None:
        beta = stability.compute_beta(config.model, config.lam, rho=config.rho)
    schedule = est.design_schedule(
        config.model, params, config.horizon, beta=beta, p0=config.p0
    )
    return schedule, beta


def _trace_from(states, measurements, estimates):
    errors = [
        [x - xh for x, xh in zip(row_x, row_h)]
        for row_x, row_h in zip(states, estimates)
    ]
    return SimulationTrace(x=states, y=measurements, xhat=estimates, e=errors)


def run(config, beta=None):
    """One full closed-loop run (first Monte Carlo index)."""
    schedule, beta = prepare_schedule(config, beta)
    states, measurements = simulate_truth(
        config.model, config.horizon, config.base_seed, 0,
        config.init_policy, config.init_scale,
    )
    estimates = est.replay(schedule, config.model, measurements)
    trace = _trace_from(states, measurements, estimates)
    return RunResult(trace=trace, schedule=schedule, beta=beta, reports=schedule.reports)


def mse(traces):
    """MSE(k) = sum_s ||e_s(k)||^2 / S and its time average."""
    if not traces:
        raise ParameterError("need at least one trace")
    horizon = traces[0].horizon
    if any(t.horizon != horizon for t in traces):
        raise DimensionError("all traces must share the same horizon")
    S = len(traces)
    out = []
    for k in range(horizon + 1):
        total = 0.0
        for t in traces:
            e = np.concatenate([np.asarray(v, dtype=float).reshape(-1) for v in t.e[k]])
            total += float(e @ e)
        out.append(total / S)
    max_err = [
        max(
            float(np.linalg.norm(np.concatenate([np.ravel(v) for v in t.e[k]])))
            for k in range(horizon + 1)
        )
        for t in traces
    ]
    return MseReport(mse=out, amse=float(np.mean(out)), max_error_per_run=max_err)


def monte_carlo(config, beta=None, schedule=None):
    """Monte Carlo MSE evaluation.

    The gain schedule is measurement-independent, so it is designed once and
    replayed against every simulated run.
    """
    if schedule is None:
        schedule, beta = prepare_schedule(config, beta)
    traces = []
    for s in range(config.runs):
        states, measurements = simulate_truth(
            config.model, config.horizon, config.base_seed, s,
            config.init_policy, config.init_scale,
        )
        estimates = est.replay(schedule, config.model, measurements)
        traces.append(_trace_from(states, measurements, estimates))
    return mse(traces), schedule


@dataclass
class SweepRow:
    g: float
    amse: float
    beta: list


def sweep_g(g_values, runs=100, horizon=100, base_seed=0, mode="delayed",
            lam=0.6, eta=100.0, rho=0.9, p0=1.0):
    """AMSE and beta table across coupling strengths of the benchmark system."""
    rows = []
    for g in g_values:
        model = model_mod.example_system(float(g))
        config = SimulationConfig(
            model=model, horizon=horizon, runs=runs, base_seed=base_seed,
            mode=mode, lam=lam, eta=eta, rho=rho, p0=p0,
        )
        beta = stability.compute_beta(model, lam, rho=rho) if mode == "delayed" else None
        report, _ = monte_carlo(config, beta=beta)
        beta_vals = list(beta.beta) if beta is not None else []
        rows.append(SweepRow(g=float(g), amse=report.amse, beta=beta_vals))
    return rows


# ---------------------------------------------------------------------------
# CSV / JSON emission


def write_trace_csv(path, trace, model):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "subsystem", "component", "x", "xhat"])
        for k in range(trace.horizon + 1):
            for i in range(model.l):
                for c in range(model.subsystems[i].n):
                    w.writerow([k, i + 1, c + 1,
                                repr(float(trace.x[k][i][c])),
                                repr(float(trace.xhat[k][i][c]))])


def write_mse_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "mse"])
        for k, v in enumerate(report.mse):
            w.writerow([k, repr(float(v))])


def write_amse_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["g", "amse"])
        for row in rows:
            w.writerow([repr(float(row.g)), repr(float(row.amse))])


def write_beta_csv(path, model, assignment, bounds=None):
    if bounds is None:
        bounds = model_mod.compute_bounds(model)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subsystem", "alpha", "beta"])
        for i in range(model.l):
            w.writerow([i + 1, repr(float(bounds.alpha[i])),
                        repr(float(assignment.beta[i]))])


def write_gains_csv(path, gains_per_step):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "subsystem", "row", "col", "value"])
        for step, row_gains in enumerate(gains_per_step, start=1):
            for i in sorted(row_gains):
                K = np.atleast_2d(row_gains[i])
                for r in range(K.shape[0]):
                    for c in range(K.shape[1]):
                        w.writerow([step, i + 1, r + 1, c + 1, repr(float(K[r, c]))])


def read_gains_csv(path, model):
    """Parse a gains CSV back into the per-step gain dictionaries."""
    per_step = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["k", "subsystem", "row", "col", "value"]
        if reader.fieldnames != expected:
            raise ParameterError(f"gains CSV must have header {','.join(expected)}")
        for rec in reader:
            k = int(rec["k"])
            i = int(rec["subsystem"]) - 1
            if not 0 <= i < model.l:
                raise ParameterError(f"gains CSV references unknown subsystem {i + 1}")
            per_step.setdefault(k, {}).setdefault(i, {})[
                (int(rec["row"]) - 1, int(rec["col"]) - 1)
            ] = float(rec["value"])
    steps = sorted(per_step)
    if steps != list(range(1, len(steps) + 1)):
        raise ParameterError("gains CSV steps must be contiguous from 1")
    out = []
    for k in steps:
        row = {}
        for i, entries in per_step[k].items():
            s = model.subsystems[i]
            K = np.zeros((s.n, s.m))
            for (r, c), v in entries.items():
                if r >= s.n or c >= s.m:
                    raise ParameterError(
                        f"gains CSV entry out of range for subsystem {i + 1}"
                    )
                K[r, c] = v
            row[i] = K
        if sorted(row) != list(range(model.l)):
            raise ParameterError(f"gains CSV step {k} is missing subsystems")
        out.append(row)
    return out


def run_report_json(reports):
    """Serializable per-step gain-design report."""
    return [
        {
            "step": r.step,
            "subsystem": r.subsystem + 1,
            "mode": r.mode,
            "solver_status": r.solver_status,
            "objective": r.objective,
            "kc_a_norm": r.kc_a_norm,
        }
        for r in sorted(reports, key=lambda r: (r.step, r.subsystem))
    ]


def write_run_report(path, reports):
    with open(path, "w") as fh:
        json.dump(run_report_json(reports), fh, indent=2)
