"""Polytopes, the displaced obstacle, and the collision constraint function.

All distances here are in position units.  The obstacle body ``O`` is a
halfspace polytope ``{p : A p <= b}`` with unit-norm rows; a displacement
``w`` translates it to ``O_w = O + w``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import conic
from .errors import ConfigurationError, InputError, NumericalError


@dataclass(frozen=True, eq=False)
class Polytope:
    """Bounded, nonempty polytope ``{p : A p <= b}``.

    Rows of ``A`` are rescaled to unit Euclidean norm (with ``b`` scaled
    alongside) so that ``A_m p - b_m`` is a signed distance to facet ``m``.
    """

    A: np.ndarray
    b: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise InputError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise InputError("polytope data contains NaN or Inf")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0):
            raise ConfigurationError("polytope has a zero facet normal")
        A = A / norms[:, None]
        b = b / norms
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        lo, hi = self._bounding_box()
        self._cache["box"] = (lo, hi)

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        n = lower.size
        A = np.vstack([np.eye(n), -np.eye(n)])
        return cls(A, np.concatenate([upper, -lower]))

    @classmethod
    def square(cls, center, side: float) -> "Polytope":
        """Axis-aligned square (cube in n-D) with facet order +e1, -e1, +e2, -e2, ..."""
        center = np.asarray(center, dtype=float).ravel()
        n = center.size
        A = np.zeros((2 * n, n))
        b = np.zeros(2 * n)
        for i in range(n):
            A[2 * i, i], A[2 * i + 1, i] = 1.0, -1.0
            b[2 * i] = center[i] + side / 2
            b[2 * i + 1] = -(center[i] - side / 2)
        return cls(A, b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_facets(self) -> int:
        return self.A.shape[0]

    def _bounding_box(self):
        n = self.dim
        lo, hi = np.empty(n), np.empty(n)
        for i in range(n):
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[i] = -sign
                res = linprog(c, A_ub=self.A, b_ub=self.b, bounds=[(None, None)] * n, method="highs")
                if res.status == 2:
                    raise ConfigurationError("polytope is empty")
                if res.status == 3:
                    raise ConfigurationError("polytope is unbounded")
                if res.status != 0:
                    raise NumericalError(f"support LP failed: {res.message}")
                if sign > 0:
                    hi[i] = -res.fun
                else:
                    lo[i] = res.fun
        return lo, hi

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self._cache["box"]

    def contains(self, p, tol: float = 0.0) -> bool:
        return bool(np.all(self.A @ np.asarray(p, dtype=float) <= self.b + tol))

    def support(self, direction) -> float:
        """``max_{p in P} direction^T p``."""
        d = np.asarray(direction, dtype=float).ravel()
        res = linprog(-d, A_ub=self.A, b_ub=self.b, bounds=[(None, None)] * self.dim, method="highs")
        if res.status != 0:
            raise NumericalError(f"support LP failed: {res.message}")
        return float(-res.fun)

    def support_many(self, directions) -> np.ndarray:
        """Support values for each row of ``directions`` (cached per direction set)."""
        D = np.atleast_2d(np.asarray(directions, dtype=float))
        key = ("support", D.tobytes())
        if key not in self._cache:
            self._cache[key] = np.array([self.support(d) for d in D])
        return self._cache[key]

    def vertices(self) -> np.ndarray:
        """Vertex enumeration by intersecting ``dim``-subsets of facets."""
        if "vertices" in self._cache:
            return self._cache["vertices"]
        n = self.dim
        scale = max(1.0, float(np.max(np.abs(self.b))))
        pts = []
        for rows in itertools.combinations(range(self.n_facets), n):
            M = self.A[list(rows)]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            p = np.linalg.solve(M, self.b[list(rows)])
            if np.all(self.A @ p <= self.b + 1e-9 * scale):
                if not any(np.linalg.norm(p - q) <= 1e-9 * scale for q in pts):
                    pts.append(p)
        if not pts:
            raise NumericalError("vertex enumeration produced no vertices")
        V = np.array(pts)
        if n == 2:
            c = V.mean(axis=0)
            V = V[np.argsort(np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0]))]
        self._cache["vertices"] = V
        return V

    def project(self, p, tol: float = 1e-10) -> np.ndarray:
        """Euclidean projection of ``p`` onto the polytope (conic QP)."""
        p = np.asarray(p, dtype=float).ravel()
        if self.contains(p, tol=1e-12):
            return p.copy()
        y, _ = _project(self.A, self.b, p, tol)
        return y

    def grid(self, spacing: float) -> np.ndarray:
        """Regular grid points (bounding-box lattice) that lie inside the polytope."""
        if not spacing > 0:
            raise InputError("grid spacing must be positive")
        lo, hi = self.bounds
        axes = [np.linspace(l, h, max(2, int(np.ceil((h - l) / spacing)) + 1)) for l, h in zip(lo, hi)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        inside = np.all(mesh @ self.A.T <= self.b + 1e-12, axis=1)
        return mesh[inside]


def _project(A, b, p, tol):
    """Solve ``min ||p - y|| s.t. A y <= b``; returns ``(y, distance)``."""
    n = p.size
    bld = conic.ConicBuilder()
    y = bld.variables(n)
    cone = bld.variables(n + 1, conic.SOC)
    bld.add_equalities([(cone[1:], np.eye(n)), (y, np.eye(n))], p)
    bld.add_inequalities([(y, A)], b)
    bld.add_objective(cone[0], 1.0)
    sol = conic.solve(bld.build(), tol=tol)
    if not sol.ok:
        raise NumericalError(f"projection failed with status {sol.status}", residuals=sol.residuals)
    return sol.primal[y], float(sol.primal[cone[0]])


@dataclass(frozen=True, eq=False)
class ObstacleModel:
    """Obstacle body, position selector ``C`` and effective clearance.

    ``clearance`` is the distance that must separate ``C x`` from the
    displaced body; callers fold the agent radius into it.
    """

    body: Polytope
    selector: np.ndarray
    clearance: float

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.selector, dtype=float))
        if C.shape[0] != self.body.dim:
            raise InputError(f"selector has {C.shape[0]} rows, obstacle lives in R^{self.body.dim}")
        if not self.clearance >= 0:
            raise InputError("clearance must be nonnegative")
        C.setflags(write=False)
        object.__setattr__(self, "selector", C)

    @property
    def n_state(self) -> int:
        return self.selector.shape[1]

    def position(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_state:
            raise InputError(f"state has dimension {x.shape[-1]}, expected {self.n_state}")
        return x @ self.selector.T

    def facet_gaps(self, x, w) -> np.ndarray:
        """``A (C x - w) - b``; broadcasts over leading axes of ``w``."""
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.body.dim:
            raise InputError(f"displacement has dimension {w.shape[-1]}, expected {self.body.dim}")
        return (self.position(x) - w) @ self.body.A.T - self.body.b


def distance_facet_max(x, w, obs: ObstacleModel):
    """``max_m [A_m (C x - w) - b_m]_+``; vectorized over rows of ``w``."""
    return np.maximum(obs.facet_gaps(x, w).max(axis=-1), 0.0)


def distance_exact(x, w, obs: ObstacleModel, tol: float = 1e-10) -> float:
    """Euclidean distance from ``C x`` to ``O_w`` via projection (test oracle)."""
    p = obs.position(x) - np.asarray(w, dtype=float)
    if obs.body.contains(p):
        return 0.0
    _, dist = _project(obs.body.A, obs.body.b, p, tol)
    return dist


def constraint_g(x, w, obs: ObstacleModel):
    """Collision constraint ``clearance - dist(C x, O_w)``; safe when <= 0."""
    return obs.clearance - distance_facet_max(x, w, obs)


def robust_margins(x, obs: ObstacleModel, support: Polytope) -> np.ndarray:
    """Per-facet slack ``A_m C x - b_m - max_{w in W} A_m w - clearance``.

    Any nonnegative entry certifies ``g(x, w) <= 0`` for every ``w`` in the support.
    """
    smax = support.support_many(obs.body.A)
    return obs.position(x) @ obs.body.A.T - obs.body.b - smax - obs.clearance


def robustly_safe(x, obs: ObstacleModel, support: Polytope, tol: float = 0.0) -> bool:
    return bool(np.max(robust_margins(x, obs, support)) >= -tol)
