"""Small dense semidefinite-programming layer.

Problems are "minimize a linear trace functional of matrix decision variables
subject to affine symmetric block-matrix inequalities <= -margin*I".  The
numerical workhorse is cvxpy (CLARABEL, falling back to SCS); every returned
optimum is re-checked against the constraints with the package's own
eigenvalue tests, never trusted from the solver alone.
"""

import json
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import DimensionError, ParameterError, SolverError
from .numerics import max_eigenvalue_sym

DEFAULT_MARGIN = 1e-9


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    rows: int
    cols: int
    symmetric: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"variable {self.name}: bad shape")
        if self.symmetric and self.rows != self.cols:
            raise DimensionError(f"variable {self.name}: symmetric but not square")


@dataclass(frozen=True)
class AffineTerm:
    """Contribution left @ X @ right (or left @ X.T @ right)."""

    var: str
    left: np.ndarray
    right: np.ndarray
    transpose: bool = False


class AffineBlock:
    """constant + sum of AffineTerm, one block of an LMI grid."""

    def __init__(self, constant, terms=()):
        self.constant = np.atleast_2d(np.asarray(constant, dtype=float))
        self.terms = list(terms)

    @property
    def shape(self):
        return self.constant.shape

    def value(self, values):
        out = np.array(self.constant)
        for t in self.terms:
            X = values[t.var]
            out = out + t.left @ (X.T if t.transpose else X) @ t.right
        return out

    def transposed(self):
        return AffineBlock(
            self.constant.T,
            [
                AffineTerm(t.var, t.right.T, t.left.T, not t.transpose)
                for t in self.terms
            ],
        )


def const_block(M):
    return AffineBlock(M)


def zero_block(rows, cols):
    return AffineBlock(np.zeros((rows, cols)))


class LmiConstraint:
    """r x r grid of affine blocks forming a symmetric matrix, <= -margin*I.

    Only the upper triangle (including diagonal) needs to be supplied; None
    entries below the diagonal are filled with the transpose of the mirror
    block.
    """

    def __init__(self, blocks, margin=DEFAULT_MARGIN, label=""):
        if margin < 0:
            raise ParameterError("margin must be >= 0")
        grid = [list(row) for row in blocks]
        r = len(grid)
        if any(len(row) != r for row in grid):
            raise DimensionError("LMI block grid must be square")
        for i in range(r):
            for j in range(i + 1, r):
                if grid[j][i] is None:
                    grid[j][i] = grid[i][j].transposed()
        self.blocks = grid
        self.margin = float(margin)
        self.label = label
        self.size = sum(self.blocks[i][i].shape[0] for i in range(r))

    def value(self, values):
        rows = [
            np.hstack([b.value(values) for b in row]) for row in self.blocks
        ]
        return np.vstack(rows)

    def residual(self, values):
        """Max eigenvalue of the evaluated (symmetrized) matrix; feasible
        points have residual <= -margin up to solver precision."""
        M = self.value(values)
        return max_eigenvalue_sym(0.5 * (M + M.T))


@dataclass
class SdpProblem:
    variables: list
    constraints: list
    objective: list  # (var name, weight matrix W): minimize sum tr(W @ X)

    def var(self, name):
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def dump_json(self):
        """Debug dump with dense numeric blocks and symbolic variable slots."""
        return json.dumps(
            {
                "variables": [
                    {"name": v.name, "rows": v.rows, "cols": v.cols, "symmetric": v.symmetric}
                    for v in self.variables
                ],
                "objective": [
                    {"var": name, "W": np.atleast_2d(W).tolist()} for name, W in self.objective
                ],
                "constraints": [
                    {
                        "label": c.label,
                        "margin": c.margin,
                        "blocks": [
                            [
                                {
                                    "constant": b.constant.tolist(),
                                    "terms": [
                                        {
                                            "var": t.var,
                                            "left": np.atleast_2d(t.left).tolist(),
                                            "right": np.atleast_2d(t.right).tolist(),
                                            "transpose": t.transpose,
                                        }
                                        for t in b.terms
                                    ],
                                }
                                for b in row
                            ]
                            for row in c.blocks
                        ],
                    }
                    for c in self.constraints
                ],
            },
            indent=2,
        )


@dataclass
class SdpSolution:
    values: dict
    objective: float
    status: str  # optimal | infeasible | iteration_limit
    worst_residual: float
    most_violated: int | None = None


@dataclass
class SolveOptions:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-6
    max_iter: int = 500
    initial: dict = field(default_factory=dict)


def norm_cap_constraint(var, bound, rows, cols, label=""):
    """LMI equivalent of ||X||_2 <= bound: [[-b I, X], [X^T, -b I]] <= 0."""
    if bound <= 0:
        raise ParameterError(f"norm bound must be > 0, got {bound}")
    X_term = AffineBlock(np.zeros((rows, cols)), [AffineTerm(var, np.eye(rows), np.eye(cols))])
    return LmiConstraint(
        [
            [const_block(-bound * np.eye(rows)), X_term],
            [None, const_block(-bound * np.eye(cols))],
        ],
        margin=0.0,
        label=label or f"norm_cap({var})",
    )


def _cvx_variables(problem):
    cvx = {}
    for v in problem.variables:
        if v.symmetric:
            cvx[v.name] = cp.Variable((v.rows, v.cols), symmetric=True, name=v.name)
        else:
            cvx[v.name] = cp.Variable((v.rows, v.cols), name=v.name)
    return cvx


def _cvx_block(block, cvx):
    expr = cp.Constant(block.constant)
    for t in block.terms:
        X = cvx[t.var]
        expr = expr + cp.Constant(np.atleast_2d(t.left)) @ (X.T if t.transpose else X) @ cp.Constant(
            np.atleast_2d(t.right)
        )
    return expr


def _cvx_grid(constraint, cvx):
    return cp.bmat([[_cvx_block(b, cvx) for b in row] for row in constraint.blocks])


def _solve_cvx(prob, max_iter):
    try:
        prob.solve(
            solver=cp.CLARABEL,
            max_iter=max(max_iter, 50),
            tol_gap_abs=1e-9,
            tol_gap_rel=1e-9,
            tol_feas=1e-9,
        )
        return prob.status
    except Exception:
        # CLARABEL occasionally rejects a cone layout; SCS is the safety net
        pass
    try:
        prob.solve(solver=cp.SCS, max_iters=20000, eps=1e-9)
        return prob.status
    except cp.error.SolverError as exc:
        raise SolverError(str(exc)) from exc


def _extract(problem, cvx):
    values = {}
    for v in problem.variables:
        val = cvx[v.name].value
        if val is None:
            return None
        val = np.atleast_2d(np.asarray(val, dtype=float))
        if v.symmetric:
            val = 0.5 * (val + val.T)
        values[v.name] = val
    return values


def _objective_value(problem, values):
    total = 0.0
    for name, W in problem.objective:
        total += float(np.trace(np.atleast_2d(W) @ values[name]))
    return total


def _phase1(problem, options):
    """Minimize the worst constraint eigenvalue; used to certify infeasibility
    and to locate the most violated constraint at the best point found."""
    cvx = _cvx_variables(problem)
    t = cp.Variable(name="_slack")
    cons = []
    for c in problem.constraints:
        expr = _cvx_grid(c, cvx)
        sz = expr.shape[0]
        cons.append(expr << (t - c.margin) * np.eye(sz))
    prob = cp.Problem(cp.Minimize(t), cons)
    _solve_cvx(prob, options.max_iter)
    values = _extract(problem, cvx)
    if values is None or t.value is None:
        return None, None, None
    residuals = [c.residual(values) + c.margin for c in problem.constraints]
    worst = int(np.argmax(residuals)) if residuals else None
    return float(t.value), values, worst


def solve(problem, options=None):
    """Solve an SdpProblem to certified feasibility/optimality tolerances."""
    options = options or SolveOptions()
    if not problem.constraints and not problem.objective:
        raise ParameterError("problem needs at least one constraint or an objective")
    cvx = _cvx_variables(problem)
    cons = []
    for c in problem.constraints:
        expr = _cvx_grid(c, cvx)
        sz = expr.shape[0]
        if c.margin > 0:
            cons.append(expr << -c.margin * np.eye(sz))
        else:
            cons.append(expr << 0)
    obj = 0
    for name, W in problem.objective:
        obj = obj + cp.trace(cp.Constant(np.atleast_2d(W)) @ cvx[name])
    prob = cp.Problem(cp.Minimize(obj), cons)
    status = _solve_cvx(prob, options.max_iter)

    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        values = _extract(problem, cvx)
        if values is None:
            raise SolverError("solver reported success without a solution")
        residuals = [c.residual(values) for c in problem.constraints]
        worst = max(residuals) if residuals else -np.inf
        if worst <= options.feas_tol:
            return SdpSolution(
                values=values,
                objective=_objective_value(problem, values),
                status="optimal",
                worst_residual=worst,
            )
        # solver-declared optimum fails our independent feasibility re-check
        return SdpSolution(
            values=values,
            objective=_objective_value(problem, values),
            status="iteration_limit",
            worst_residual=worst,
            most_violated=int(np.argmax(residuals)),
        )

    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE, cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            raise SolverError("objective is unbounded below on the feasible set")
        t_star, values, worst = _phase1(problem, options)
        if values is not None and t_star is not None and t_star <= options.feas_tol:
            # primary solve failed but the problem is feasible: report best effort
            residuals = [c.residual(values) for c in problem.constraints]
            return SdpSolution(
                values=values,
                objective=_objective_value(problem, values),
                status="iteration_limit",
                worst_residual=max(residuals) if residuals else -np.inf,
                most_violated=worst,
            )
        return SdpSolution(
            values=values or {},
            objective=np.inf,
            status="infeasible",
            worst_residual=t_star if t_star is not None else np.inf,
            most_violated=worst,
        )

    # iteration limit or solver gave up: return best iterate when available
    values = _extract(problem, cvx)
    if values is None:
        t_star, values, worst = _phase1(problem, options)
        if values is None:
            raise SolverError(f"solver terminated with status {status} and no iterate")
    residuals = [c.residual(values) for c in problem.constraints]
    return SdpSolution(
        values=values,
        objective=_objective_value(problem, values),
        status="iteration_limit",
        worst_residual=max(residuals) if residuals else -np.inf,
        most_violated=int(np.argmax(residuals)) if residuals else None,
    )
