"""Interconnected time-varying system models.

A model is an ordered list of subsystems plus directed coupling blocks.  Each
dynamics matrix is either constant, a constant-plus-sinusoid family evaluated
at integer steps, or an explicit per-step table.  Neighbor sets are
symmetrized: j is a neighbor of i if either direction carries a coupling
block, and the absent direction is treated as a zero block.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .numerics import min_eigenvalue_sym, spectral_norm, symmetrize

QW_PSD_TOL = 1e-10
QV_PD_MIN = 1e-12


@dataclass(frozen=True)
class TvEntry:
    """One matrix entry: c0 + sum a*sin(w*k+phi) + sum a*cos(w*k+phi)."""

    c0: float = 0.0
    sin_terms: tuple = ()
    cos_terms: tuple = ()

    def value(self, k):
        v = self.c0
        for a, w, phi in self.sin_terms:
            v += a * math.sin(w * k + phi)
        for a, w, phi in self.cos_terms:
            v += a * math.cos(w * k + phi)
        return v

    def bound(self):
        return (
            abs(self.c0)
            + sum(abs(a) for a, _, _ in self.sin_terms)
            + sum(abs(a) for a, _, _ in self.cos_terms)
        )


class TimeVaryingMatrix:
    """Matrix-valued function of the integer step k.

    Holds either a grid of TvEntry coefficients or an explicit per-step table
    (the table is clamped to its last step for later k).
    """

    def __init__(self, rows, cols, entries=None, table=None):
        if rows < 1 or cols < 1:
            raise DimensionError(f"invalid matrix shape {rows}x{cols}")
        self.rows = int(rows)
        self.cols = int(cols)
        if (entries is None) == (table is None):
            raise ConfigError("exactly one of entries/table must be given")
        if entries is not None:
            entries = list(entries)
            if len(entries) != rows * cols:
                raise DimensionError(
                    f"expected {rows * cols} entries, got {len(entries)}"
                )
            self.entries = entries
            self.table = None
        else:
            tab = np.asarray(table, dtype=float)
            if tab.ndim != 3 or tab.shape[1:] != (rows, cols) or tab.shape[0] < 1:
                raise DimensionError(f"bad table shape {tab.shape}")
            if not np.all(np.isfinite(tab)):
                raise ConfigError("table contains non-finite entries")
            self.entries = None
            self.table = tab

    @classmethod
    def constant(cls, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M.shape[0], M.shape[1], entries=[TvEntry(c0=float(v)) for v in M.ravel()])

    def value(self, k):
        if k < 0:
            raise ParameterError(f"step index must be >= 0, got {k}")
        if self.table is not None:
            return np.array(self.table[min(k, self.table.shape[0] - 1)])
        vals = [e.value(k) for e in self.entries]
        return np.array(vals, dtype=float).reshape(self.rows, self.cols)

    def bound_matrix(self):
        """Entrywise bound matrix B with |M(k)| <= B for all k."""
        if self.table is not None:
            return np.max(np.abs(self.table), axis=0)
        return np.array([e.bound() for e in self.entries]).reshape(self.rows, self.cols)

    def is_constant(self):
        if self.table is not None:
            return self.table.shape[0] == 1
        return all(not e.sin_terms and not e.cos_terms for e in self.entries)

    def to_json(self):
        if self.table is not None:
            return {"rows": self.rows, "cols": self.cols, "table": self.table.tolist()}
        if self.is_constant():
            return self.value(0).tolist()
        return {
            "rows": self.rows,
            "cols": self.cols,
            "entries": [
                {
                    "c0": e.c0,
                    "sin": [list(t) for t in e.sin_terms],
                    "cos": [list(t) for t in e.cos_terms],
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj, where=""):
        try:
            if isinstance(obj, list):
                return cls.constant(np.asarray(obj, dtype=float))
            rows, cols = int(obj["rows"]), int(obj["cols"])
            if "table" in obj:
                return cls(rows, cols, table=obj["table"])
            entries = []
            for e in obj["entries"]:
                entries.append(
                    TvEntry(
                        c0=float(e.get("c0", 0.0)),
                        sin_terms=tuple(tuple(map(float, t)) for t in e.get("sin", [])),
                        cos_terms=tuple(tuple(map(float, t)) for t in e.get("cos", [])),
                    )
                )
            return cls(rows, cols, entries=entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad time-varying matrix {where}: {exc}") from exc

    def __eq__(self, other):
        if not isinstance(other, TimeVaryingMatrix):
            return NotImplemented
        if (self.rows, self.cols) != (other.rows, other.cols):
            return False
        if (self.table is None) != (other.table is None):
            return False
        if self.table is not None:
            return np.array_equal(self.table, other.table)
        return self.entries == other.entries


@dataclass
class SubsystemSpec:
    """Dynamics, measurement and noise description of one subsystem."""

    name: str
    A: TimeVaryingMatrix
    Gamma: TimeVaryingMatrix
    C: TimeVaryingMatrix
    D: TimeVaryingMatrix
    Qw: np.ndarray
    Qv: np.ndarray

    @property
    def n(self):
        return self.A.rows

    @property
    def m(self):
        return self.C.rows

    def validate(self):
        n, m = self.n, self.m
        if self.A.cols != n:
            raise ConfigError(f"subsystem {self.name}: A must be square")
        if self.Gamma.rows != n:
            raise ConfigError(f"subsystem {self.name}: Gamma row count != n")
        if self.C.cols != n:
            raise ConfigError(f"subsystem {self.name}: C column count != n")
        if self.D.rows != m:
            raise ConfigError(f"subsystem {self.name}: D row count != m")
        qw = np.atleast_2d(np.asarray(self.Qw, dtype=float))
        qv = np.atleast_2d(np.asarray(self.Qv, dtype=float))
        if qw.shape != (self.Gamma.cols, self.Gamma.cols):
            raise ConfigError(f"subsystem {self.name}: Qw shape mismatch")
        if qv.shape != (self.D.cols, self.D.cols):
            raise ConfigError(f"subsystem {self.name}: Qv shape mismatch")
        if min_eigenvalue_sym(qw) < -QW_PSD_TOL:
            raise ConfigError(f"subsystem {self.name}: Qw is not PSD")
        if min_eigenvalue_sym(qv) < QV_PD_MIN:
            raise ConfigError(f"subsystem {self.name}: Qv must be strictly PD")
        self.Qw = symmetrize(qw)
        self.Qv = symmetrize(qv)


@dataclass
class CouplingSpec:
    """Block through which the source subsystem's state enters the target."""

    source: str
    target: str
    A: TimeVaryingMatrix


@dataclass
class ModelSnapshot:
    """All model matrices evaluated at one step."""

    k: int
    A: list
    Gamma: list
    C: list
    D: list
    coupling: dict  # (target_index, source_index) -> ndarray, zero where absent

    def A_pair(self, i, j):
        return self.coupling[(i, j)]


@dataclass
class NormBounds:
    """Certified spectral-norm bounds plus sampled suprema for diagnostics."""

    alpha: list
    alpha_pair: dict  # (i, j) -> bound on ||A_{i,j}(k)||, zero where absent
    delta_a: float
    delta_gamma: float
    delta_c: float
    delta_d: float
    sampled_alpha: list = field(default_factory=list)
    sampled_alpha_pair: dict = field(default_factory=dict)


class InterconnectedModel:
    """Immutable collection of subsystems plus coupling graph."""

    def __init__(self, subsystems, couplings):
        if not subsystems:
            raise ConfigError("model needs at least one subsystem")
        names = [s.name for s in subsystems]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate subsystem names")
        self.subsystems = list(subsystems)
        self.couplings = list(couplings)
        self.index = {s.name: i for i, s in enumerate(self.subsystems)}
        for s in self.subsystems:
            s.validate()

        self._blocks = {}
        seen = set()
        for c in self.couplings:
            if c.source not in self.index or c.target not in self.index:
                raise ConfigError(
                    f"coupling {c.source}->{c.target}: unknown subsystem name"
                )
            if c.source == c.target:
                raise ConfigError(f"coupling {c.source}->{c.target}: self coupling")
            key = (self.index[c.target], self.index[c.source])
            if key in seen:
                raise ConfigError(f"duplicate coupling {c.source}->{c.target}")
            seen.add(key)
            i, j = key
            ni, nj = self.subsystems[i].n, self.subsystems[j].n
            if (c.A.rows, c.A.cols) != (ni, nj):
                raise ConfigError(
                    f"coupling {c.source}->{c.target}: block must be {ni}x{nj}"
                )
            self._blocks[key] = c.A

        # symmetrized neighbor sets: in- and out-neighbors
        l = len(self.subsystems)
        self.omega = [set() for _ in range(l)]
        for (i, j) in self._blocks:
            self.omega[i].add(j)
            self.omega[j].add(i)
        self.sigma = [set(j for j in self.omega[i] if j > i) for i in range(l)]

    @property
    def l(self):
        return len(self.subsystems)

    @property
    def n_total(self):
        return sum(s.n for s in self.subsystems)

    def dims(self):
        return [s.n for s in self.subsystems]

    def offsets(self):
        off, acc = [], 0
        for s in self.subsystems:
            off.append(acc)
            acc += s.n
        return off

    def coupling_tv(self, i, j):
        """TimeVaryingMatrix through which x_j enters subsystem i, or None."""
        return self._blocks.get((i, j))

    def neighbor_pairs(self):
        """Unordered coupled pairs (i, j) with i < j."""
        pairs = set()
        for i in range(self.l):
            for j in self.omega[i]:
                pairs.add((min(i, j), max(i, j)))
        return sorted(pairs)


def evaluate(model, k):
    """Evaluate every model matrix at step k."""
    if k < 0:
        raise ParameterError(f"step index must be >= 0, got {k}")
    A = [s.A.value(k) for s in model.subsystems]
    Gamma = [s.Gamma.value(k) for s in model.subsystems]
    C = [s.C.value(k) for s in model.subsystems]
    D = [s.D.value(k) for s in model.subsystems]
    coupling = {}
    for i in range(model.l):
        for j in model.omega[i]:
            tv = model.coupling_tv(i, j)
            if tv is None:
                coupling[(i, j)] = np.zeros((model.subsystems[i].n, model.subsystems[j].n))
            else:
                coupling[(i, j)] = tv.value(k)
    return ModelSnapshot(k=k, A=A, Gamma=Gamma, C=C, D=D, coupling=coupling)


def _block_diag(mats):
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def augment(model, k):
    """Augmented (A, Gamma, C, D, Qw, Qv) matrices at step k."""
    snap = evaluate(model, k)
    off = model.offsets()
    n = model.n_total
    A = np.zeros((n, n))
    for i in range(model.l):
        ni = model.subsystems[i].n
        A[off[i] : off[i] + ni, off[i] : off[i] + ni] = snap.A[i]
        for j in model.omega[i]:
            nj = model.subsystems[j].n
            A[off[i] : off[i] + ni, off[j] : off[j] + nj] = snap.coupling[(i, j)]
    Gamma = _block_diag(snap.Gamma)
    C = _block_diag(snap.C)
    D = _block_diag(snap.D)
    Qw = _block_diag([np.atleast_2d(s.Qw) for s in model.subsystems])
    Qv = _block_diag([np.atleast_2d(s.Qv) for s in model.subsystems])
    return A, Gamma, C, D, Qw, Qv


def compute_bounds(model, sample_horizon=64):
    """Certified norm bounds from analytic entrywise bound matrices.

    |A(k)| <= B entrywise implies ||A(k)||_2 <= ||B||_2 for the nonnegative
    bound matrix B, so each alpha is valid for every k, not just sampled k.
    Sampled suprema over [0, sample_horizon) are recorded for diagnostics.
    """
    if sample_horizon < 1:
        raise ParameterError("sample_horizon must be >= 1")
    alpha = [spectral_norm(s.A.bound_matrix()) for s in model.subsystems]
    alpha_pair = {}
    for i in range(model.l):
        for j in model.omega[i]:
            tv = model.coupling_tv(i, j)
            alpha_pair[(i, j)] = spectral_norm(tv.bound_matrix()) if tv is not None else 0.0

    off = model.offsets()
    n = model.n_total
    A_bound = np.zeros((n, n))
    for i in range(model.l):
        ni = model.subsystems[i].n
        A_bound[off[i] : off[i] + ni, off[i] : off[i] + ni] = model.subsystems[i].A.bound_matrix()
        for j in model.omega[i]:
            tv = model.coupling_tv(i, j)
            if tv is not None:
                nj = model.subsystems[j].n
                A_bound[off[i] : off[i] + ni, off[j] : off[j] + nj] = tv.bound_matrix()
    delta_a = spectral_norm(A_bound)
    delta_gamma = spectral_norm(_block_diag([s.Gamma.bound_matrix() for s in model.subsystems]))
    delta_c = spectral_norm(_block_diag([s.C.bound_matrix() for s in model.subsystems]))
    delta_d = spectral_norm(_block_diag([s.D.bound_matrix() for s in model.subsystems]))

    sampled_alpha = [0.0] * model.l
    sampled_pair = {key: 0.0 for key in alpha_pair}
    for k in range(sample_horizon):
        snap = evaluate(model, k)
        for i in range(model.l):
            sampled_alpha[i] = max(sampled_alpha[i], spectral_norm(snap.A[i]))
            for j in model.omega[i]:
                sampled_pair[(i, j)] = max(
                    sampled_pair[(i, j)], spectral_norm(snap.coupling[(i, j)])
                )
    for i in range(model.l):
        if sampled_alpha[i] > alpha[i] + 1e-9:
            raise NumericsBoundViolation(i)
    return NormBounds(
        alpha=alpha,
        alpha_pair=alpha_pair,
        delta_a=delta_a,
        delta_gamma=delta_gamma,
        delta_c=delta_c,
        delta_d=delta_d,
        sampled_alpha=sampled_alpha,
        sampled_alpha_pair=sampled_pair,
    )


class NumericsBoundViolation(AssertionError):
    """Sampled norm exceeded its analytic bound: internal invariant broken."""


def model_to_json(model):
    return {
        "subsystems": [
            {
                "name": s.name,
                "A": s.A.to_json(),
                "Gamma": s.Gamma.to_json(),
                "C": s.C.to_json(),
                "D": s.D.to_json(),
                "Qw": np.atleast_2d(s.Qw).tolist(),
                "Qv": np.atleast_2d(s.Qv).tolist(),
            }
            for s in model.subsystems
        ],
        "couplings": [
            {"source": c.source, "target": c.target, "A": c.A.to_json()}
            for c in model.couplings
        ],
    }


def emit_model(model):
    return json.dumps(model_to_json(model), indent=2)


def model_from_json(doc):
    if not isinstance(doc, dict):
        raise ConfigError("model document must be a JSON object")
    try:
        subs_raw = doc["subsystems"]
    except KeyError as exc:
        raise ConfigError("model document missing 'subsystems'") from exc
    if not isinstance(subs_raw, list) or not subs_raw:
        raise ConfigError("'subsystems' must be a nonempty list")
    subsystems = []
    for raw in subs_raw:
        try:
            name = str(raw["name"])
            sub = SubsystemSpec(
                name=name,
                A=TimeVaryingMatrix.from_json(raw["A"], f"{name}.A"),
                Gamma=TimeVaryingMatrix.from_json(raw["Gamma"], f"{name}.Gamma"),
                C=TimeVaryingMatrix.from_json(raw["C"], f"{name}.C"),
                D=TimeVaryingMatrix.from_json(raw["D"], f"{name}.D"),
                Qw=np.atleast_2d(np.asarray(raw["Qw"], dtype=float)),
                Qv=np.atleast_2d(np.asarray(raw["Qv"], dtype=float)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad subsystem entry: {exc}") from exc
        subsystems.append(sub)
    couplings = []
    for raw in doc.get("couplings", []):
        try:
            couplings.append(
                CouplingSpec(
                    source=str(raw["source"]),
                    target=str(raw["target"]),
                    A=TimeVaryingMatrix.from_json(
                        raw["A"], f"{raw.get('source')}->{raw.get('target')}"
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad coupling entry: {exc}") from exc
    return InterconnectedModel(subsystems, couplings)


def load_model(document):
    """Parse and validate a model from JSON text (or an already-parsed dict)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    else:
        doc = document
    return model_from_json(doc)


def _tv(c0_grid, sin=None, cos=None):
    """Build a TimeVaryingMatrix from a constant grid plus optional single
    sin/cos terms given as {(row, col): amplitude} with unit angular rate."""
    base = np.atleast_2d(np.asarray(c0_grid, dtype=float))
    rows, cols = base.shape
    entries = []
    for r in range(rows):
        for c in range(cols):
            s = ((float((sin or {}).get((r, c), 0.0)), 1.0, 0.0),) if (sin or {}).get((r, c)) else ()
            co = ((float((cos or {}).get((r, c), 0.0)), 1.0, 0.0),) if (cos or {}).get((r, c)) else ()
            entries.append(TvEntry(c0=base[r, c], sin_terms=s, cos_terms=co))
    return TimeVaryingMatrix(rows, cols, entries=entries)


def example_system(g):
    """Three-subsystem benchmark system with ring coupling of strength g."""
    if g < 0:
        raise ParameterError("coupling scale g must be >= 0")
    eye2 = TimeVaryingMatrix.constant(np.eye(2))
    qw = np.diag([0.1, 0.1])

    s1 = SubsystemSpec(
        name="S1",
        A=_tv([[0.2, 0.2], [0.2, 0.2]], sin={(1, 0): 0.1}, cos={(0, 1): 0.2}),
        Gamma=eye2,
        C=_tv([[0.3, 0.4]], cos={(0, 0): 0.3}),
        D=TimeVaryingMatrix.constant([[1.0]]),
        Qw=qw,
        Qv=np.array([[0.1]]),
    )
    s2 = SubsystemSpec(
        name="S2",
        A=_tv([[0.3, 0.1], [0.2, 0.2]], sin={(1, 0): 0.2}, cos={(0, 1): 0.3}),
        Gamma=eye2,
        C=_tv([[0.6, 0.3], [0.2, 0.7]], sin={(1, 1): 0.1}, cos={(0, 0): 0.2}),
        D=eye2,
        Qw=qw,
        Qv=np.diag([0.1, 0.1]),
    )
    s3 = SubsystemSpec(
        name="S3",
        A=_tv([[0.3, 0.1], [0.1, 0.2]], sin={(0, 1): 0.2}, cos={(1, 0): 0.1}),
        Gamma=eye2,
        C=_tv([[0.5, 0.3], [0.1, 0.7]], sin={(0, 0): 0.1}, cos={(1, 1): 0.1}),
        D=eye2,
        Qw=qw,
        Qv=np.diag([0.1, 0.1]),
    )
    couplings = []
    if g > 0:
        block = TimeVaryingMatrix.constant(g * 0.1 * np.eye(2))
        couplings = [
            CouplingSpec(source="S3", target="S1", A=block),
            CouplingSpec(source="S1", target="S2", A=block),
            CouplingSpec(source="S2", target="S3", A=block),
        ]
    return InterconnectedModel([s1, s2, s3], couplings)
