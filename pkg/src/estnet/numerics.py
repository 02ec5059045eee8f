"""Dense real-matrix utilities: spectral norms, symmetric eigenvalue bounds,
semidefiniteness verdicts and the Schur-complement block used to encode norm caps.

All functions are pure and operate on plain numpy arrays.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, ShapeError

# asymmetry above this (inf-norm of S - S^T) is treated as a caller bug
ASYM_TOL = 1e-9
# default absolute tolerance for negative-semidefiniteness verdicts
NSD_TOL = 1e-8


@dataclass(frozen=True)
class SymCheckReport:
    """Verdict carrier for a <= 0 test on a symmetric matrix."""

    is_nsd: bool
    max_eigenvalue: float
    tolerance_used: float


def _as_matrix(M):
    A = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2 or A.size == 0:
        raise DimensionError(f"expected a nonempty 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ShapeError("matrix contains non-finite entries")
    return A


def spectral_norm(M):
    """Largest singular value of M."""
    A = _as_matrix(M)
    return float(np.linalg.norm(A, 2))


def symmetrize(S):
    """Return (S + S^T)/2 after checking S is square and nearly symmetric."""
    A = _as_matrix(S)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    asym = np.max(np.abs(A - A.T)) if A.size else 0.0
    if asym > ASYM_TOL:
        raise ShapeError(f"matrix asymmetry {asym:.3e} exceeds {ASYM_TOL:.1e}")
    return 0.5 * (A + A.T)

def max_eigenvalue_sym(S):
    """Largest eigenvalue of the symmetrized input."""
    return float(np.linalg.eigvalsh(symmetrize(S))[-1])


def min_eigenvalue_sym(S):
    """Smallest eigenvalue of the symmetrized input."""
    return float(np.linalg.eigvalsh(symmetrize(S))[0])


def is_nsd(S, tol=NSD_TOL):
    """Negative-semidefiniteness verdict at absolute tolerance ``tol``."""
    if tol < 0:
        raise ParameterError(f"tolerance must be >= 0, got {tol}")
    mx = max_eigenvalue_sym(S)
    return SymCheckReport(is_nsd=bool(mx <= tol), max_eigenvalue=mx, tolerance_used=tol)


def is_psd(S, tol=NSD_TOL):
    """Positive-semidefiniteness verdict (min eigenvalue >= -tol)."""
    report = is_nsd(-symmetrize(S), tol)
    return report


def schur_norm_block(T, lam):
    """Symmetric block [[-lam*I, T], [T^T, -lam*I]].

    The block is NSD exactly when ||T||_2 <= lam, which is the Schur-complement
    step that converts every norm cap in this package into a matrix inequality.
    """
    if lam <= 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    A = _as_matrix(T)
    r, c = A.shape
    out = np.zeros((r + c, r + c))
    out[:r, :r] = -lam * np.eye(r)
    out[r:, r:] = -lam * np.eye(c)
    out[:r, r:] = A
    out[r:, :r] = A.T
    return out


def psd_sqrt(Q, clip_tol=1e-12):
    """Symmetric PSD square-root factor of Q via eigendecomposition.

    Eigenvalues in [-clip_tol, 0) are clipped to zero; materially negative
    eigenvalues raise.
    """
    S = symmetrize(Q)
    w, V = np.linalg.eigh(S)
    if w.size and w[0] < -max(clip_tol, 1e-9):
        raise ShapeError(f"matrix is not PSD (min eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T
