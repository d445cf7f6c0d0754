"""Conic programs in standard form and their solution.

A :class:`ConicProgram` is

    minimize    c^T x
    subject to  A x = b
                x = (x_1, ..., x_p),  x_i in K_i

where every block ``K_i`` is the free cone, the nonnegative orthant, or a
second-order cone ``{(t, v) : ||v|| <= t}``.  Quadratic costs enter through
:func:`quadratic_epigraph`.  Numerical work is delegated to the Clarabel
interior-point engine; this module owns the data contract, the status
mapping, and the residual report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import InputError

FREE = "free"
NONNEG = "nonneg"
SOC = "soc"
_KINDS = (FREE, NONNEG, SOC)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max-iter"
INACCURATE = "inaccurate"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20000


@dataclass(frozen=True)
class ConeBlock:
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InputError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise InputError("cone block size must be positive")


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """Problem data in standard form.

    Attributes:
        c: Objective vector, one entry per variable.
        A: Equality matrix (sparse), ``A.shape[1] == len(c)``.
        b: Equality right-hand side.
        cones: Consecutive variable blocks; their sizes sum to ``len(c)``.
    """

    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: tuple[ConeBlock, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        A = sp.csc_matrix(self.A, dtype=float)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "cones", tuple(self.cones))
        n = c.size
        if sum(blk.size for blk in self.cones) != n:
            raise InputError("cone blocks do not partition the variable vector")
        if A.shape != (b.size, n):
            raise InputError(f"equality matrix has shape {A.shape}, expected {(b.size, n)}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(b)) and np.all(np.isfinite(A.data))):
            raise InputError("program data contains NaN or Inf")

    @property
    def n_vars(self) -> int:
        return self.c.size

    def with_rhs(self, b) -> "ConicProgram":
        """Same matrix and cones, new equality right-hand side (shares the solver cache)."""
        b = np.asarray(b, dtype=float).ravel()
        if b.shape != self.b.shape or not np.all(np.isfinite(b)):
            raise InputError("replacement right-hand side has the wrong shape or non-finite entries")
        # Skip __post_init__: the matrix is already validated and converted.
        prog = object.__new__(ConicProgram)
        for name, value in (("c", self.c), ("A", self.A), ("b", b), ("cones", self.cones), ("_cache", self._cache)):
            object.__setattr__(prog, name, value)
        return prog

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for blk in self.cones:
            out.append(slice(start, start + blk.size))
            start += blk.size
        return out


@dataclass(frozen=True)
class ConicSolution:
    """Outcome of :func:`solve`.

    ``dual`` holds the equality multipliers ``y`` and ``dual_slack`` the cone
    multipliers ``z = c - A^T y``.  For infeasible or unbounded programs
    ``certificate`` carries the separating direction (``y`` for primal
    infeasibility, ``x`` for unboundedness).
    """

    status: str
    primal: np.ndarray
    dual: np.ndarray
    dual_slack: np.ndarray
    objective: float
    dual_objective: float
    residuals: tuple[float, float, float]
    iterations: int
    certificate: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _clarabel_data(prog: ConicProgram):
    cached = prog._cache.get("clarabel")
    if cached is not None:
        return cached
    n = prog.n_vars
    blocks, cones = [], []
    if prog.b.size:
        cones.append(clarabel.ZeroConeT(prog.b.size))
    cols = []
    for blk, sl in zip(prog.cones, prog.block_slices()):
        if blk.kind == FREE:
            continue
        cols.append(np.arange(sl.start, sl.stop))
        if blk.kind == NONNEG and blocks and blocks[-1][0] == NONNEG:
            blocks[-1][1] += blk.size  # adjacent orthants form one cone
        else:
            blocks.append([blk.kind, blk.size])
    for kind, size in blocks:
        cones.append(clarabel.NonnegativeConeT(size) if kind == NONNEG else clarabel.SecondOrderConeT(size))
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
    sel = sp.csc_matrix((-np.ones(cols.size), (np.arange(cols.size), cols)), shape=(cols.size, n))
    rows = [prog.A, sel]
    A_cl = sp.vstack(rows, format="csc")
    A_cl.sort_indices()
    P = sp.csc_matrix((n, n))
    data = (P, A_cl, cones, cols.size)
    prog._cache["clarabel"] = data
    return data


def _settings(tol: float, max_iter: int):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = int(min(max_iter, 2**31 - 1))
    s.tol_feas = tol
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_infeas_abs = tol
    s.tol_infeas_rel = tol
    s.tol_ktratio = max(tol * 1e2, 1e-7)
    s.max_threads = 1
    return s


def _relative_gap(p: float, d: float) -> float:
    gap = abs(p - d)
    return min(gap, gap / max(1.0, min(abs(p), abs(d))))


def solve(prog: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> ConicSolution:
    """Solve a conic program.

    Args:
        prog: Program in standard form.
        tol: Feasibility and duality-gap tolerance, must be positive.
        max_iter: Iteration cap for the interior-point method.

    Returns:
        A :class:`ConicSolution`; ``status`` is never silently optimistic.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    P, A_cl, cones, _ = _clarabel_data(prog)
    b_cl = np.concatenate([prog.b, np.zeros(A_cl.shape[0] - prog.b.size)])
    solver = clarabel.DefaultSolver(P, prog.c, A_cl, b_cl, cones, _settings(tol, max_iter))
    raw = solver.solve()

    x = np.asarray(raw.x, dtype=float)
    z = np.asarray(raw.z, dtype=float)
    m = prog.b.size
    y = -z[:m]
    dual_slack = prog.c - prog.A.T @ y
    status_name = str(raw.status)
    residuals = (float(raw.r_prim), float(raw.r_dual), _relative_gap(raw.obj_val, raw.obj_val_dual))
    certificate = None

    if status_name == "Solved":
        status = OPTIMAL if max(residuals) <= 10 * tol else INACCURATE
    elif status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status = INFEASIBLE
        # Farkas direction: b^T y > 0 and -A^T y in the dual cone.
        certificate = y
    elif status_name in ("DualInfeasible", "AlmostDualInfeasible"):
        status = UNBOUNDED
        certificate = x
    elif status_name in ("MaxIterations", "MaxTime"):
        status = MAX_ITER
    else:
        status = INACCURATE
    return ConicSolution(
        status=status,
        primal=x,
        dual=y,
        dual_slack=dual_slack,
        objective=float(prog.c @ x),
        dual_objective=float(prog.b @ y),
        residuals=residuals,
        iterations=int(raw.iterations),
        certificate=certificate,
    )


class ConicBuilder:
    """Incremental assembly of a :class:`ConicProgram`.

    Variables are allocated in blocks; linear rows reference them through
    integer index arrays.  Inequalities ``a^T x <= r`` become equalities
    with a fresh nonnegative slack, which keeps the program in standard form.
    """

    def __init__(self):
        self._blocks: list[ConeBlock] = []
        self._n = 0
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self._m = 0
        self._obj: dict[int, float] = {}

    @property
    def n_vars(self) -> int:
        return self._n

    @property
    def n_rows(self) -> int:
        return self._m

    def variables(self, size: int, cone: str = FREE) -> np.ndarray:
        """Allocate ``size`` variables; for ``cone='soc'`` they form one cone."""
        blk = ConeBlock(cone, int(size))
        self._blocks.append(blk)
        idx = np.arange(self._n, self._n + blk.size)
        self._n += blk.size
        return idx

    def add_equalities(self, terms: Iterable[tuple[np.ndarray, np.ndarray]], rhs) -> np.ndarray:
        """Add rows ``sum_i M_i x[idx_i] = rhs``; returns the new row indices."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        r = rhs.size
        rows = np.arange(self._m, self._m + r)
        for idx, M in terms:
            idx = np.asarray(idx, dtype=int).ravel()
            M = np.asarray(M, dtype=float).reshape(r, idx.size)
            rr, cc = np.nonzero(M)
            self._rows.append(rows[rr])
            self._cols.append(idx[cc])
            self._vals.append(M[rr, cc])
        self._rhs.append(rhs)
        self._m += r
        return rows

    def add_inequalities(self, terms: Iterable[tuple[np.ndarray, np.ndarray]], rhs) -> np.ndarray:
        """Add rows ``sum_i M_i x[idx_i] <= rhs``; returns the row indices."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        slack = self.variables(rhs.size, NONNEG)
        return self.add_equalities(list(terms) + [(slack, np.eye(rhs.size))], rhs)

    def add_triplets(self, rows, cols, vals, rhs, inequality: bool = False) -> np.ndarray:
        """Add rows given as local-row/column/value triplets (``<=`` if ``inequality``)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        r = rhs.size
        rows = np.asarray(rows, dtype=int).ravel()
        cols = np.asarray(cols, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if inequality:
            slack = self.variables(r, NONNEG)
            rows = np.concatenate([rows, np.arange(r)])
            cols = np.concatenate([cols, slack])
            vals = np.concatenate([vals, np.ones(r)])
        out = np.arange(self._m, self._m + r)
        keep = vals != 0
        self._rows.append(out[rows[keep]])
        self._cols.append(cols[keep])
        self._vals.append(vals[keep])
        self._rhs.append(rhs)
        self._m += r
        return out

    def add_objective(self, idx, coeffs) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), idx.shape)
        for i, v in zip(idx.tolist(), coeffs.tolist()):
            self._obj[i] = self._obj.get(i, 0.0) + v

    def build(self) -> ConicProgram:
        c = np.zeros(self._n)
        for i, v in self._obj.items():
            c[i] = v
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
        A = sp.csc_matrix((vals, (rows, cols)), shape=(self._m, self._n))
        b = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
        return ConicProgram(c, A, b, tuple(self._blocks))


def psd_factor(Q, name: str = "cost matrix") -> np.ndarray:
    """Return ``L`` with ``L^T L = Q``; rows for zero eigenvalues are dropped."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, atol=1e-12):
        raise InputError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(Q)
    scale = max(1.0, float(np.max(np.abs(vals))) if vals.size else 1.0)
    if vals.size and vals.min() < -1e-10 * scale:
        raise InputError(f"{name} is indefinite (min eigenvalue {vals.min():.3e})")
    keep = vals > 1e-14 * scale
    return np.sqrt(vals[keep])[:, None] * vecs[:, keep].T


def quadratic_epigraph(
    builder: ConicBuilder,
    pieces: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray | float]],
) -> int:
    """Add ``t >= sum_i (x[idx_i] - c_i)^T Q_i (x[idx_i] - c_i)`` and return the index of ``t``.

    Each piece is ``(Q_i, idx_i, c_i)`` with ``Q_i`` positive semidefinite.
    The sum of squares is encoded with the rotated cone
    ``||(2 v, t - 1)|| <= t + 1``.
    """
    stacked = []
    for Q, idx, center in pieces:
        L = psd_factor(Q)
        idx = np.asarray(idx, dtype=int).ravel()
        if L.shape[1] != idx.size:
            raise InputError("cost matrix does not match the variable block")
        center = np.broadcast_to(np.asarray(center, dtype=float), idx.shape)
        if L.shape[0]:
            stacked.append((L, idx, center))
    t = builder.variables(1)[0]
    width = sum(L.shape[0] for L, _, _ in stacked)
    cone = builder.variables(2 + width, SOC)
    builder.add_equalities([(cone[:1], [[1.0]]), ([t], [[-1.0]])], [1.0])
    builder.add_equalities([(cone[1:2], [[1.0]]), ([t], [[-1.0]])], [-1.0])
    start = 2
    for L, idx, center in stacked:
        r = L.shape[0]
        builder.add_equalities(
            [(cone[start:start + r], np.eye(r)), (idx, -2.0 * L)],
            -2.0 * L @ center,
        )
        start += r
    return int(t)


def dump_triplets(prog: ConicProgram, path) -> None:
    """Write the program as plain-text sparse triplets.

    Sections are introduced by ``# objective``, ``# equality``, ``# rhs`` and
    ``# cones``; each data line is ``row col value`` (``index value`` for
    vectors, ``kind size`` for cone blocks).
    """
    A = prog.A.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# variables {prog.n_vars} rows {prog.b.size}\n# objective\n")
        for i in np.nonzero(prog.c)[0]:
            fh.write(f"{i} {prog.c[i]!r}\n")
        fh.write("# equality\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{r} {c} {v!r}\n")
        fh.write("# rhs\n")
        for i in np.nonzero(prog.b)[0]:
            fh.write(f"{i} {prog.b[i]!r}\n")
        fh.write("# cones\n")
        for blk in prog.cones:
            fh.write(f"{blk.kind} {blk.size}\n")
