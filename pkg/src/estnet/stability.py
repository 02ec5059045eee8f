"""Stability machinery for the distributed estimators.

Contains the centralized norm condition and its boundedness certificate
(oracle side), the distributed pairwise matrix-inequality checkers, the
coupling-weight selection rule, and the offline sequential computation of the
per-subsystem gain-residual caps beta_i.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .errors import InfeasibleBeta, ParameterError, ProtocolError, TopologyError
from .numerics import is_nsd, spectral_norm

NORM_TOL = 1e-8
NSD_TOL = 1e-8


@dataclass(frozen=True)
class StabilityParams:
    lam: float
    eta: float
    mode: str = "delayed"  # "ideal" | "delayed"

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ParameterError(f"lambda must be in (0,1), got {self.lam}")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ParameterError(f"eta must be finite positive, got {self.eta}")
        if self.mode not in ("ideal", "delayed"):
            raise ParameterError(f"unknown mode {self.mode!r}")


@dataclass
class EpsilonWeights:
    """Positive pair weights, row-normalized over each neighbor set."""

    eps: dict  # (i, j) -> weight

    def __getitem__(self, key):
        return self.eps[key]


@dataclass
class BetaAssignment:
    beta: list
    lam: float
    eps_bar: EpsilonWeights
    binding: list = field(default_factory=list)  # per subsystem: what capped beta_i


@dataclass
class BoundednessCertificate:
    delta_p1: float
    f_p_of_delta_p1: float
    delta_p0: float

    @property
    def bound(self):
        return max(self.delta_p1, self.f_p_of_delta_p1, self.delta_p0)


def residual_matrix(K, C):
    """K_C = I - K C, the gain residual governing error contraction."""
    K = np.atleast_2d(K)
    C = np.atleast_2d(C)
    return np.eye(K.shape[0]) - K @ C


def build_N_local(K_i, A_i_prev, C_i, lam):
    """[[ -lam I, K_C A(k-1) ], [ *, -lam I ]] for one subsystem."""
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    KC = residual_matrix(K_i, C_i)
    T = KC @ np.atleast_2d(A_i_prev)
    n = T.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = -lam * np.eye(n)
    out[n:, n:] = -lam * np.eye(n)
    out[:n, n:] = T
    out[n:, :n] = T.T
    return out


def build_N_pair(K_i, K_j, A_ij_prev, A_ji_prev, C_i, C_j):
    """Off-diagonal coupling block of the pairwise matrix inequality.

    Generally not symmetric on its own; it enters as an off-diagonal block of
    the symmetric pair matrix.
    """
    KCi = residual_matrix(K_i, C_i)
    KCj = residual_matrix(K_j, C_j)
    top = KCi @ np.atleast_2d(A_ij_prev)  # n_i x n_j
    bot = np.atleast_2d(A_ji_prev).T @ KCj.T  # n_i x n_j
    n_i = top.shape[0]
    n_j = top.shape[1]
    out = np.zeros((2 * n_i, 2 * n_j))
    out[:n_i, n_j:] = top
    out[n_i:, :n_j] = bot
    return out


def build_M_pair(i, j, gains, snapshot_now, snapshot_prev, eps, lam):
    """Symmetric pair matrix [[eps_ij N_i, N_ij], [*, eps_ji N_j]].

    snapshot_now supplies C(k); snapshot_prev supplies A(k-1) and couplings.
    """
    if (i, j) not in snapshot_prev.coupling and (j, i) not in snapshot_prev.coupling:
        raise TopologyError(f"subsystems {i} and {j} are not neighbors")
    N_i = build_N_local(gains[i], snapshot_prev.A[i], snapshot_now.C[i], lam)
    N_j = build_N_local(gains[j], snapshot_prev.A[j], snapshot_now.C[j], lam)
    N_ij = build_N_pair(
        gains[i],
        gains[j],
        snapshot_prev.coupling[(i, j)],
        snapshot_prev.coupling[(j, i)],
        snapshot_now.C[i],
        snapshot_now.C[j],
    )
    e_ij = eps[(i, j)]
    e_ji = eps[(j, i)]
    si = N_i.shape[0]
    sj = N_j.shape[0]
    out = np.zeros((si + sj, si + sj))
    out[:si, :si] = e_ij * N_i
    out[si:, si:] = e_ji * N_j
    out[:si, si:] = N_ij
    out[si:, :si] = N_ij.T
    return out


def _normalized_weights(model, raw):
    eps = {}
    for i in range(model.l):
        if not model.omega[i]:
            continue
        total = sum(raw[(i, j)] for j in model.omega[i])
        if total <= 0.0:
            # all couplings vanish at this step: fall back to uniform weights
            for j in model.omega[i]:
                eps[(i, j)] = 1.0 / len(model.omega[i])
        else:
            for j in model.omega[i]:
                eps[(i, j)] = raw[(i, j)] / total
    return EpsilonWeights(eps)


def epsilon_feasible(model, k):
    """Pair weights proportional to the coupling norms at step k-1."""
    if k < 1:
        raise ParameterError("epsilon weights need k >= 1")
    snap = model_mod.evaluate(model, k - 1)
    raw = {}
    for i in range(model.l):
        for j in model.omega[i]:
            raw[(i, j)] = spectral_norm(snap.coupling[(i, j)]) + spectral_norm(
                snap.coupling[(j, i)]
            )
    return _normalized_weights(model, raw)


def epsilon_bar(model, bounds):
    """Time-invariant pair weights proportional to the certified coupling bounds."""
    raw = {}
    for i in range(model.l):
        for j in model.omega[i]:
            raw[(i, j)] = bounds.alpha_pair[(i, j)] + bounds.alpha_pair[(j, i)]
    return _normalized_weights(model, raw)


@dataclass
class DistributedReport:
    c1: dict  # i -> {"contraction": norm K_C A, "gain": norm K, "ok": bool}
    pairs: dict  # (i, j) -> {"max_eig": float, "ok": bool}
    passed: bool


def check_distributed(k, gains, model, params, eps, tol=NORM_TOL):
    """Per-subsystem C1 and per-pair matrix-inequality verdicts at step k."""
    if k < 1:
        raise ParameterError("distributed check needs k >= 1")
    for i in range(model.l):
        if i not in gains or gains[i] is None:
            raise ProtocolError(f"missing gain for subsystem {i} at step {k}")
    snap_now = model_mod.evaluate(model, k)
    snap_prev = model_mod.evaluate(model, k - 1)
    c1 = {}
    for i in range(model.l):
        KC = residual_matrix(gains[i], snap_now.C[i])
        contraction = spectral_norm(KC @ snap_prev.A[i])
        gain_norm = spectral_norm(gains[i])
        c1[i] = {
            "contraction": contraction,
            "gain": gain_norm,
            "ok": contraction <= params.lam + tol and gain_norm <= params.eta + tol,
        }
    pairs = {}
    for (i, j) in model.neighbor_pairs():
        M = build_M_pair(i, j, gains, snap_now, snap_prev, eps, params.lam)
        rep = is_nsd(M, NSD_TOL)
        pairs[(i, j)] = {"max_eig": rep.max_eigenvalue, "ok": rep.is_nsd}
    passed = all(v["ok"] for v in c1.values()) and all(v["ok"] for v in pairs.values())
    return DistributedReport(c1=c1, pairs=pairs, passed=passed)


def check_corollary(K_i, C_i, beta_i, eta, tol=NORM_TOL):
    """Delayed-communication per-subsystem test: ||K_C|| <= beta, ||K|| <= eta."""
    if beta_i <= 0:
        raise ParameterError("beta must be positive")
    KC = residual_matrix(K_i, C_i)
    return spectral_norm(KC) <= beta_i + tol and spectral_norm(K_i) <= eta + tol


def centralized_condition(k, gains, model, lam, eta, tol=NORM_TOL, return_norms=False):
    """Augmented norm test ||K_C(k) A(k-1)|| <= lam, ||K(k)|| <= eta."""
    if k < 1:
        raise ParameterError("centralized check needs k >= 1")
    A_prev = model_mod.augment(model, k - 1)[0]
    _, _, C, _, _, _ = model_mod.augment(model, k)
    K = _augment_gains(model, gains)
    KC = np.eye(K.shape[0]) - K @ C
    contraction = spectral_norm(KC @ A_prev)
    gain_norm = spectral_norm(K)
    ok = contraction <= lam + tol and gain_norm <= eta + tol
    if return_norms:
        return ok, contraction, gain_norm
    return ok


def _augment_gains(model, gains):
    off_r, off_c = 0, 0
    n = model.n_total
    m = sum(s.m for s in model.subsystems)
    K = np.zeros((n, m))
    for i, s in enumerate(model.subsystems):
        K[off_r : off_r + s.n, off_c : off_c + s.m] = np.atleast_2d(gains[i])
        off_r += s.n
        off_c += s.m
    return K


def _pair_bound_own(alpha_i, alpha_ij, c_j, lam, q_scale):
    """Largest beta_i satisfying the pairwise inequality in its own
    orientation, with the neighbor's slack c_j = lam - alpha_j*beta_j fixed.

    Own orientation: (lam - alpha_i beta_i) c_j >= beta_i^2 alpha_ij^2 / ebar_prod,
    i.e. q beta^2 + alpha_i c_j beta - lam c_j <= 0 with q = alpha_ij^2/ebar_prod.
    """
    q = q_scale * alpha_ij**2
    if q <= 0.0:
        return math.inf  # reduces to beta_i <= lam/alpha_i, handled by the cap
    if c_j <= 0.0:
        return -math.inf
    b = alpha_i * c_j
    disc = b * b + 4.0 * q * lam * c_j
    return (-b + math.sqrt(disc)) / (2.0 * q)


def _pair_bound_neighbor(alpha_i, alpha_ji, beta_j, c_j, lam, q_scale):
    """Largest beta_i satisfying the neighbor's orientation with beta_j fixed:
    c_j (lam - alpha_i beta_i) >= beta_j^2 alpha_ji^2 / ebar_prod."""
    rhs = q_scale * (beta_j * alpha_ji) ** 2
    if rhs <= 0.0:
        return math.inf
    if c_j <= 0.0:
        return -math.inf
    room = lam - rhs / c_j
    if alpha_i <= 0.0:
        return math.inf if room >= 0.0 else -math.inf
    return room / alpha_i


def compute_beta(model, lam, eps_bar=None, rho=0.9, bounds=None, sample_horizon=64):
    """Sequential offline computation of the gain-residual caps beta_i.

    Subsystems are processed in index order.  Each beta_i is the largest value
    satisfying its slack cap (rho*lam/alpha_i while it still has unassigned
    neighbors, lam/alpha_i otherwise) and both orientations of the pairwise
    inequality against every already-assigned neighbor.
    """
    if not 0.0 < lam < 1.0:
        raise ParameterError(f"lambda must be in (0,1), got {lam}")
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must be in (0,1), got {rho}")
    if bounds is None:
        bounds = model_mod.compute_bounds(model, sample_horizon)
    if eps_bar is None:
        eps_bar = epsilon_bar(model, bounds)

    beta = [None] * model.l
    binding = [None] * model.l
    for i in range(model.l):
        alpha_i = bounds.alpha[i]
        has_unassigned = any(j > i for j in model.omega[i])
        if alpha_i > 0.0:
            cap = (rho * lam / alpha_i) if has_unassigned else (lam / alpha_i)
        else:
            cap = math.inf
        best = cap
        which = "slack_cap" if has_unassigned else "norm_cap"
        for j in sorted(model.omega[i]):
            if j >= i:
                continue
            q_scale = 1.0 / (eps_bar[(i, j)] * eps_bar[(j, i)])
            c_j = lam - bounds.alpha[j] * beta[j]
            own = _pair_bound_own(alpha_i, bounds.alpha_pair[(i, j)], c_j, lam, q_scale)
            if own < best:
                best, which = own, f"pair({i},{j})"
            nb = _pair_bound_neighbor(
                alpha_i, bounds.alpha_pair[(j, i)], beta[j], c_j, lam, q_scale
            )
            if nb < best:
                best, which = nb, f"pair({j},{i})"
        if not best > 0.0:
            raise InfeasibleBeta(
                i,
                which,
                f"no positive beta exists for subsystem {i} "
                f"(binding constraint {which}, bound {best:.6g})",
            )
        # alpha_i == 0 with no binding pair leaves beta unconstrained
        beta[i] = best
        binding[i] = which
    return BetaAssignment(beta=beta, lam=lam, eps_bar=eps_bar, binding=binding)


def verify_beta(model, assignment, bounds=None, tol=1e-9):
    """Re-check both orientations of every pairwise inequality by direct
    substitution; returns the worst violation (<= tol means valid)."""
    if bounds is None:
        bounds = model_mod.compute_bounds(model)
    worst = -math.inf
    lam = assignment.lam
    beta = assignment.beta
    eb = assignment.eps_bar
    for i in range(model.l):
        if bounds.alpha[i] > 0:
            worst = max(worst, beta[i] * bounds.alpha[i] - lam)
        for j in model.omega[i]:
            a_ij = bounds.alpha_pair[(i, j)]
            if a_ij == 0.0:
                continue  # right side vanishes; left side is a product of negatives
            lhs = (bounds.alpha[i] * beta[i] - lam) * (bounds.alpha[j] * beta[j] - lam)
            rhs = (beta[i] * a_ij) ** 2 / (eb[(i, j)] * eb[(j, i)])
            worst = max(worst, rhs - lhs)
    return worst


def boundedness_certificate(bounds, lam, eta, Qw, Qv, delta_p0):
    """Closed-form bound on the augmented error-covariance norm.

    delta_p1 = (eta^2 delta_d^2 ||Qv|| + (1 + eta delta_c)^2 delta_gamma^2 ||Qw||) / (1 - lam^2)
    f_p(delta_p1) = lam^2 delta_p1 + (same numerator), which equals delta_p1
    by construction; the overall bound is the max of the three candidates.
    """
    if lam >= 1.0:
        raise ParameterError(f"lambda must be < 1, got {lam}")
    qv = spectral_norm(np.atleast_2d(Qv)) if np.size(Qv) else 0.0
    qw = spectral_norm(np.atleast_2d(Qw)) if np.size(Qw) else 0.0
    num = eta**2 * bounds.delta_d**2 * qv + (1.0 + eta * bounds.delta_c) ** 2 * bounds.delta_gamma**2 * qw
    delta_p1 = num / (1.0 - lam**2)
    f_p = lam**2 * delta_p1 + num
    return BoundednessCertificate(delta_p1=delta_p1, f_p_of_delta_p1=f_p, delta_p0=float(delta_p0))
