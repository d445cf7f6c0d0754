"""Finite-horizon safe MPC with a sampled terminal set, and the rollout loop.

The terminal constraint ``x_K in Pi_x(S)`` is handled by enumerating stored
states.  Each candidate gives a convex subproblem; an equality-constrained
LQ relaxation yields a lower bound per candidate, so candidates are visited
in bound order and the search stops once the bound reaches the incumbent.
Candidates outside the set reachable in ``K`` steps under the input box are
skipped without a solve.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import conic
from .errors import InfeasibleError, InputError, NonConvergenceError
from .geometry import ObstacleModel, Polytope, robust_margins
from .risk import AmbiguitySet, WorstCaseBound, worst_case_cvar_ub
from .safeset import CostMap, SampledSafeSet, snap_key

log = logging.getLogger(__name__)

WASS = "wass"
CL_WASS = "cl_wass"
INN_WASS = "inn_wass"
VARIANTS = (WASS, CL_WASS, INN_WASS)

MEMBERSHIP_TOL = 1e-6
# Right-hand side allowance on the frozen risk constraint; well inside MEMBERSHIP_TOL.
CONSTRAINT_SLACK = 1e-7
# Acceptance thresholds for a subproblem solution re-simulated from its inputs.
VERIFY_TOL = 0.5 * MEMBERSHIP_TOL
BOX_TOL = 1e-7
TERMINAL_MATCH_TOL = 1e-6
MPC_TOL = 1e-9
# Margin below which a facet constraint counts as active at a solution.
ACTIVE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Dynamics:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise InputError(f"inconsistent dynamics shapes {A.shape}, {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InputError("dynamics matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u

    def simulate(self, x0, inputs) -> np.ndarray:
        out = [np.asarray(x0, dtype=float)]
        for u in np.asarray(inputs, dtype=float).reshape(-1, self.n_u):
            out.append(self.step(out[-1], u))
        return np.array(out)


@dataclass(frozen=True, eq=False)
class MpcConfig:
    """Horizon, quadratic stage cost, boxes, start/target and loop limits."""

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    state_lower: np.ndarray
    state_upper: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    start: np.ndarray
    target: np.ndarray
    terminal_tol: float = 1e-2
    step_cap: int = 200
    rounds: int = 3
    tol: float = MPC_TOL

    def __post_init__(self):
        for name in ("Q", "R", "state_lower", "state_upper", "input_lower", "input_upper", "start", "target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.horizon < 1:
            raise InputError("horizon must be at least 1")
        conic.psd_factor(self.Q, "Q")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise InputError("R must be positive definite")
        if np.any(self.state_lower > self.state_upper) or np.any(self.input_lower > self.input_upper):
            raise InputError("box bounds are inverted")
        if np.any(self.target < self.state_lower) or np.any(self.target > self.state_upper):
            raise InputError("target lies outside the state box")
        if np.any(self.input_lower > 0) or np.any(self.input_upper < 0):
            raise InputError("the input box must contain 0")
        if self.rounds < 1:
            raise InputError("rounds must be at least 1")

    def stage_cost(self, x, u) -> float:
        dx = np.asarray(x) - self.target
        return float(dx @ self.Q @ dx + u @ self.R @ u)


@dataclass(frozen=True, eq=False)
class SafetySetSpec:
    """Which safety set to impose, with its data.

    ``ambiguity`` is used by the ``wass``/``cl_wass`` variants, ``offsets``
    (one worst-case CVaR value per obstacle facet) by ``inn_wass``.
    """

    variant: str
    obstacle: ObstacleModel
    support: Polytope
    beta: float
    ambiguity: AmbiguitySet | None = None
    offsets: np.ndarray | None = None
    _memo: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if self.variant == INN_WASS:
            if self.offsets is None or np.asarray(self.offsets).shape != (self.obstacle.body.n_facets,):
                raise InputError("inn_wass needs one offset per obstacle facet")
            object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float))
        elif self.ambiguity is None:
            raise InputError(f"{self.variant} needs an ambiguity set")

    def inner_margins(self, x) -> np.ndarray:
        """``A_m C x - b_m - b_hat_m - clearance`` for every facet."""
        body = self.obstacle.body
        return self.obstacle.position(x) @ body.A.T - body.b - self.offsets - self.obstacle.clearance

    def bound(self, x) -> WorstCaseBound:
        return worst_case_cvar_ub(self.ambiguity, self.beta, x, self.obstacle, self.support)

    def member(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        """Membership in this variant's safety set (memoized per snapped state)."""
        key = snap_key(x)
        hit = self._memo.get(key)
        if hit is None:
            if self.variant == INN_WASS:
                hit = -float(np.max(self.inner_margins(x)))
            elif np.max(robust_margins(x, self.obstacle, self.support)) >= 0:
                # Safe for every displacement in the support, hence for every distribution.
                hit = -np.inf
            else:
                hit = self.bound(x).value
            self._memo[key] = hit
        return hit <= tol


@dataclass(frozen=True)
class CompiledSafety:
    """Per-step constraints for steps ``1 .. K-1``.

    ``facets[k-1]`` is the half-space index used at step ``k`` (inner
    variant); ``bounds[k-1]`` holds the frozen multipliers (risk variants).
    """

    variant: str
    facets: tuple = ()
    bounds: tuple = ()


def compile_safety_constraints(spec: SafetySetSpec, reference, facets=None) -> CompiledSafety:
    """Convexify the safety set around ``reference`` (states ``x_0 .. x_K``).

    The inner variant keeps, per step, the facet whose half-space has the
    largest slack at the reference state (or the given ``facets``).  The
    risk variants freeze the bound's multipliers at each reference state.
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    K = reference.shape[0] - 1
    steps = reference[1:K]
    if spec.variant == INN_WASS:
        if facets is None:
            facets = tuple(int(np.argmax(spec.inner_margins(x))) for x in steps)
        if len(facets) != K - 1:
            raise InputError("need one facet per interior step")
        return CompiledSafety(spec.variant, facets=tuple(facets))
    return CompiledSafety(spec.variant, bounds=tuple(spec.bound(x) for x in steps))


def runner_up_facets(spec: SafetySetSpec, reference) -> dict:
    """Steps whose second-best facet also has nonnegative slack at the reference."""
    out = {}
    for k, x in enumerate(np.atleast_2d(reference)[1:-1], start=1):
        margins = spec.inner_margins(x)
        order = np.argsort(-margins, kind="stable")
        if margins.size > 1 and margins[order[1]] >= 0:
            out[k] = int(order[1])
    return out


@dataclass(frozen=True, eq=False)
class MpcSolution:
    states: np.ndarray
    inputs: np.ndarray
    objective: float
    terminal: np.ndarray
    terminal_owner: tuple
    solve_time: float = 0.0
    candidates_solved: int = 0
    facets: tuple = ()


class _Subproblem:
    """Convex subproblem for a fixed constraint compilation; candidates swap the RHS."""

    def __init__(self, x0, cfg: MpcConfig, dyn: Dynamics, spec: SafetySetSpec, compiled: CompiledSafety):
        K, n, m = cfg.horizon, dyn.n_x, dyn.n_u
        bld = conic.ConicBuilder()
        X = bld.variables((K + 1) * n).reshape(K + 1, n)
        U = bld.variables(K * m).reshape(K, m)
        bld.add_equalities([(X[0], np.eye(n))], x0)
        for k in range(K):
            bld.add_equalities([(X[k + 1], np.eye(n)), (X[k], -dyn.A), (U[k], -dyn.B)], np.zeros(n))
        self.terminal_rows = bld.add_equalities([(X[K], np.eye(n))], np.zeros(n))
        # Linear inequality rows G z <= h over z = (x_1 .. x_{K-1}, u_0 .. u_{K-1}),
        # kept for the Lagrangian candidate bound.
        nx = n * (K - 1)
        z_idx = np.concatenate([X[1:K].ravel(), U.ravel()])
        G, h, rows = [], [], []
        for sign, bounds, sl in ((1, cfg.state_upper, slice(0, nx)), (-1, -cfg.state_lower, slice(0, nx)),
                                 (1, cfg.input_upper, slice(nx, None)), (-1, -cfg.input_lower, slice(nx, None))):
            cols = z_idx[sl]
            if cols.size == 0:
                continue
            rhs = np.tile(bounds, cols.size // bounds.size)
            rows.append(bld.add_inequalities([(cols, sign * np.eye(cols.size))], rhs))
            Gi = np.zeros((cols.size, z_idx.size))
            Gi[:, sl] = sign * np.eye(cols.size)
            G.append(Gi)
            h.append(rhs)
        self._add_safety(bld, X, cfg, spec, compiled, G, h, rows)
        self.G, self.h, self.ineq_rows = np.vstack(G), np.concatenate(h), np.concatenate(rows)
        self.multipliers = None

        pieces = [(cfg.R, U[k], 0.0) for k in range(K)]
        pieces += [(cfg.Q, X[k], cfg.target) for k in range(1, K)]
        t = conic.quadratic_epigraph(bld, pieces)
        bld.add_objective(t, 1.0)
        self.prog = bld.build()
        self.X, self.U = X, U
        self.cfg, self.dyn, self.x0 = cfg, dyn, np.asarray(x0, dtype=float)
        self.spec, self.compiled = spec, compiled

    @staticmethod
    def _add_safety(bld, X, cfg, spec, compiled, G, h, rows):
        C = spec.obstacle.selector
        body = spec.obstacle.body
        if compiled.variant == INN_WASS:
            n, nz = X.shape[1], G[0].shape[1]
            for k, fm in enumerate(compiled.facets, start=1):
                # A_m C x_k >= b_m + b_hat_m + clearance
                a = body.A[fm] @ C
                rhs = body.b[fm] + spec.offsets[fm] + spec.obstacle.clearance
                rows.append(bld.add_inequalities([(X[k], -a[None, :])], [-rhs]))
                Gi = np.zeros((1, nz))
                Gi[0, n * (k - 1):n * k] = -a
                G.append(Gi)
                h.append([-rhs])
            return
        for k, B in enumerate(compiled.bounds, start=1):
            weights, slopes, offsets = B.compressed
            L = weights.size
            eta = bld.variables(1)[0]
            s = bld.variables(L, conic.NONNEG)   # s_l / p_l
            ell = np.arange(L)
            n = X.shape[1]
            # s_l - eta >= offsets_l - slopes_l . x_k
            rows = np.concatenate([ell, ell, np.repeat(ell, n)])
            cols = np.concatenate([s, np.full(L, eta), np.tile(X[k], L)])
            vals = np.concatenate([-np.ones(L), np.ones(L), -slopes.ravel()])
            bld.add_triplets(rows, cols, vals, -offsets, inequality=True)
            # radius term - eta + sum_l p_l s_l / beta <= slack
            bld.add_triplets(
                np.zeros(L + 1, dtype=int),
                np.concatenate([[eta], s]),
                np.concatenate([[-1.0], weights / B.beta]),
                [CONSTRAINT_SLACK - B.radius_term],
                inequality=True,
            )

    def solve(self, candidate):
        """Solve for one terminal candidate; ``None`` unless the result verifies."""
        b = self.prog.b.copy()
        b[self.terminal_rows] = candidate
        sol = conic.solve(self.prog.with_rhs(b), tol=self.cfg.tol)
        if sol.status not in (conic.OPTIMAL, conic.INACCURATE, conic.MAX_ITER):
            return None
        inputs = sol.primal[self.U]
        states = self.dyn.simulate(self.x0, inputs)
        if not self._verify(states, inputs, candidate):
            log.debug("candidate rejected after verification (status %s)", sol.status)
            return None
        # Inequality rows carry a nonnegative slack, so -y is their multiplier.
        self.multipliers = np.maximum(-sol.dual[self.ineq_rows], 0.0)
        cost = sum(self.cfg.stage_cost(states[k], inputs[k]) for k in range(self.cfg.horizon))
        return states, inputs, cost

    def _verify(self, states, inputs, candidate) -> bool:
        cfg, K = self.cfg, self.cfg.horizon
        if np.any(inputs < cfg.input_lower - BOX_TOL) or np.any(inputs > cfg.input_upper + BOX_TOL):
            return False
        inner = states[1:K]
        if np.any(inner < cfg.state_lower - BOX_TOL) or np.any(inner > cfg.state_upper + BOX_TOL):
            return False
        if np.linalg.norm(states[K] - candidate) > TERMINAL_MATCH_TOL:
            return False
        c = self.compiled
        if c.variant == INN_WASS:
            margins = [self.spec.inner_margins(states[k])[fm] for k, fm in enumerate(c.facets, start=1)]
            return min(margins, default=0.0) >= -VERIFY_TOL
        return all(B.frozen_value(states[k]) <= VERIFY_TOL for k, B in enumerate(c.bounds, start=1))


def solve_fixed_terminal(x0, cfg: MpcConfig, dyn: Dynamics, spec: SafetySetSpec, compiled: CompiledSafety, terminal):
    """Horizon problem with a single prescribed terminal state.

    Returns:
        ``(states, inputs, cost)`` if the solution verifies, else ``None``.
    """
    return _Subproblem(x0, cfg, dyn, spec, compiled).solve(np.asarray(terminal, dtype=float))


class _Reachable:
    """Facet description of the states reachable in ``K`` steps under the input box.

    ``x_K = A^K x_0 + sum_k A^(K-1-k) B u_k`` with ``u_k`` in a box is a
    zonotope; its facet normals are orthogonal to ``n - 1`` of its
    generators.  Above ``MAX_FACETS`` candidate normals only the coordinate
    directions are kept, which still gives a valid outer bound.
    """

    MAX_FACETS = 20_000
    REL_TOL = 1e-7

    def __init__(self, cfg: MpcConfig, dyn: Dynamics):
        K, n = cfg.horizon, dyn.n_x
        powers = [np.linalg.matrix_power(dyn.A, K - 1 - k) for k in range(K)]
        half = (cfg.input_upper - cfg.input_lower) / 2
        mid = (cfg.input_upper + cfg.input_lower) / 2
        self.AK = np.linalg.matrix_power(dyn.A, K)
        self.offset = sum(P @ dyn.B @ mid for P in powers)
        gens = np.hstack([P @ dyn.B * half for P in powers]).T
        gens = gens[np.linalg.norm(gens, axis=1) > 0]
        normals = [np.eye(n)]
        if n > 1 and math.comb(len(gens), n - 1) <= self.MAX_FACETS:
            for idx in itertools.combinations(range(len(gens)), n - 1):
                _, sv, vt = np.linalg.svd(gens[list(idx)])
                if sv[-1] > 1e-9 * max(sv[0], 1e-300):
                    normals.append(vt[-1][None, :])
        D = np.unique(np.round(np.vstack(normals), 12), axis=0)
        self.D = D
        self.h = np.abs(D @ gens.T).sum(axis=1)

    def mask(self, x0, candidates) -> np.ndarray:
        dev = (np.atleast_2d(candidates) - (self.AK @ x0 + self.offset)) @ self.D.T
        return np.all(np.abs(dev) <= self.h * (1 + self.REL_TOL) + self.REL_TOL, axis=1)


class _LqBound:
    """Equality-constrained LQ value for many terminal candidates at once, plus reachability."""

    def __init__(self, cfg: MpcConfig, dyn: Dynamics):
        K, n, m = cfg.horizon, dyn.n_x, dyn.n_u
        self.reach = _Reachable(cfg, dyn)
        self.ok = False
        if K < 2:
            return
        nz = n * (K - 1) + m * K
        E = np.zeros((n * K, nz))
        xi = lambda k: slice(n * (k - 1), n * k)  # noqa: E731  x_k, k = 1..K-1
        ui = lambda k: slice(n * (K - 1) + m * k, n * (K - 1) + m * (k + 1))  # noqa: E731
        for k in range(K):
            r = slice(n * k, n * (k + 1))
            if k + 1 <= K - 1:
                E[r, xi(k + 1)] = np.eye(n)
            if k >= 1:
                E[r, xi(k)] = -dyn.A
            E[r, ui(k)] = -dyn.B
        if np.linalg.matrix_rank(E) < E.shape[0]:
            return
        H = sla.block_diag(*([cfg.Q] * (K - 1) + [cfg.R] * K))
        kkt = np.block([[2 * H, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
        if np.linalg.cond(kkt) > 1e12:
            return
        self.lu = sla.lu_factor(kkt)
        self.H, self.E, self.nz = H, E, nz
        self.zf = np.concatenate([np.tile(cfg.target, K - 1), np.zeros(m * K)])
        self.n, self.dyn, self.ok = n, dyn, True

    def values(self, x0, candidates, G=None, h=None, mu=None) -> np.ndarray:
        """Lower bounds on the horizon cost (without the ``x_0`` stage) per candidate.

        With multipliers ``mu >= 0`` for rows ``G z <= h`` the bound is the
        Lagrangian relaxation of those rows; without them it is the plain
        equality-constrained LQ value.
        """
        C = np.atleast_2d(candidates)
        if not self.ok:
            return np.zeros(C.shape[0])
        n = self.n
        g = np.zeros(self.nz) if mu is None else G.T @ mu
        rhs_eq = np.zeros((self.E.shape[0], C.shape[0]))
        rhs_eq[:n] += (self.dyn.A @ x0)[:, None]
        rhs_eq[-n:] -= C.T
        top = np.repeat((2 * self.H @ self.zf - g)[:, None], C.shape[0], axis=1)
        sol = sla.lu_solve(self.lu, np.vstack([top, rhs_eq]))
        z = sol[: self.nz]
        dz = z - self.zf[:, None]
        vals = np.einsum("ic,ij,jc->c", dz, self.H, dz)
        if mu is None:
            # Round down slightly so the bound stays valid under floating point.
            return np.maximum(vals * (1 - 1e-9) - 1e-12, 0.0)
        # Accepted solutions may violate a row by up to VERIFY_TOL, so relax every row by it.
        vals = vals + g @ z - mu @ (h + VERIFY_TOL)
        return vals - 1e-9 * (1.0 + np.abs(vals))


def _enumerate(x0, cfg, dyn, spec, compiled, qmap: CostMap, lq: "_LqBound", exhaustive: bool):
    sub = _Subproblem(x0, cfg, dyn, spec, compiled)
    base = cfg.stage_cost(x0, np.zeros(dyn.n_u)) + qmap.costs
    lb = base + lq.values(x0, qmap.states)
    if not exhaustive:
        lb[~lq.reach.mask(x0, qmap.states)] = np.inf
    pending = np.ones(lb.size, dtype=bool)
    best, solved = None, 0
    while pending.any():
        open_idx = np.flatnonzero(pending)
        i = int(open_idx[np.argmin(lb[open_idx])])
        pending[i] = False
        if not exhaustive and (lb[i] == np.inf or (best is not None and lb[i] >= best[2])):
            break
        out = sub.solve(qmap.states[i])
        solved += 1
        if out is None:
            continue
        states, inputs, cost = out
        total = cost + qmap.costs[i]
        if best is None or total < best[2]:
            best = (states, inputs, total, i)
            if not exhaustive:
                # The incumbent's multipliers give a tighter bound for the rest.
                rest = np.flatnonzero(pending & np.isfinite(lb))
                if rest.size:
                    lag = base[rest] + lq.values(x0, qmap.states[rest], sub.G, sub.h, sub.multipliers)
                    lb[rest] = np.maximum(lb[rest], lag)
    return best, solved, sub


def solve_finite_horizon(
    x,
    ss: SampledSafeSet,
    qmap: CostMap,
    spec: SafetySetSpec,
    cfg: MpcConfig,
    dyn: Dynamics,
    reference,
    exhaustive: bool = False,
    lq: _LqBound | None = None,
) -> MpcSolution:
    """Best terminal candidate's subproblem solution.

    Args:
        x: Current state.
        ss: Sampled safe set.
        qmap: ``min_cost_map(ss)``.
        spec: Safety set to impose.
        cfg: Horizon, costs and boxes.
        dyn: Linear dynamics.
        reference: ``K + 1`` states used to convexify the safety set.
        exhaustive: Solve every candidate (disables bound-based pruning).
        lq: Optional precomputed LQ bound.

    Returns:
        The optimal solution over all candidates.

    Raises:
        InfeasibleError: If every candidate subproblem is infeasible.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    lq = lq or _LqBound(cfg, dyn)
    compiled = compile_safety_constraints(spec, reference)
    best, solved, sub = _enumerate(x, cfg, dyn, spec, compiled, qmap, lq, exhaustive)

    if spec.variant == INN_WASS:
        alternatives = runner_up_facets(spec, reference)
        if best is None:
            for k, fm in alternatives.items():
                facets = list(compiled.facets)
                facets[k - 1] = fm
                trial = CompiledSafety(INN_WASS, facets=tuple(facets))
                cand, n_solved, _ = _enumerate(x, cfg, dyn, spec, trial, qmap, lq, exhaustive)
                solved += n_solved
                if cand is not None:
                    best, compiled = cand, trial
                    break
        else:
            # Swapping out a facet that is inactive at the optimum cannot lower the cost.
            active = {
                k: fm for k, fm in alternatives.items()
                if spec.inner_margins(best[0][k])[compiled.facets[k - 1]] <= ACTIVE_TOL
            }
            for k, fm in active.items():
                facets = list(compiled.facets)
                facets[k - 1] = fm
                trial = CompiledSafety(INN_WASS, facets=tuple(facets))
                out = _Subproblem(x, cfg, dyn, spec, trial).solve(qmap.states[best[3]])
                solved += 1
                if out is not None and out[2] + qmap.costs[best[3]] < best[2] - 1e-12:
                    best = (out[0], out[1], out[2] + qmap.costs[best[3]], best[3])
                    compiled = trial
    elif best is not None:
        # Re-linearize at the incumbent and re-solve its terminal candidate.
        for _ in range(cfg.rounds - 1):
            trial = compile_safety_constraints(spec, best[0])
            out = _Subproblem(x, cfg, dyn, spec, trial).solve(qmap.states[best[3]])
            solved += 1
            if out is None or out[2] + qmap.costs[best[3]] >= best[2] - 1e-9 * max(1.0, best[2]):
                break
            best = (out[0], out[1], out[2] + qmap.costs[best[3]], best[3])

    if best is None:
        raise InfeasibleError("every terminal candidate is infeasible", state_dump={"x": x.tolist()})
    states, inputs, total, i = best
    return MpcSolution(
        states=states,
        inputs=inputs,
        objective=float(total),
        terminal=qmap.states[i],
        terminal_owner=qmap.owners[i],
        solve_time=time.perf_counter() - t0,
        candidates_solved=solved,
        facets=compiled.facets,
    )


@dataclass(frozen=True, eq=False)
class Plan:
    """Input sequence over the horizon with the safe-set point its terminal state tracks."""

    states: np.ndarray
    inputs: np.ndarray
    owner: tuple


def shift_plan(plan: Plan, ss: SampledSafeSet, dyn: Dynamics) -> Plan:
    """Drop the first step and continue from the terminal point along its stored trajectory."""
    j, t = plan.owner
    _, u_next = ss.successor(j, t)
    tr = ss.trajectories[j]
    t_next = min(t + 1, tr.first_t + len(tr) - 1)
    inputs = np.vstack([plan.inputs[1:], u_next[None, :]])
    return Plan(dyn.simulate(plan.states[1], inputs), inputs, (j, t_next))


def plan_cost(plan: Plan, ss: SampledSafeSet, cfg: MpcConfig) -> float:
    """Stage costs along the plan plus the stored cost-to-go of its terminal point."""
    j, t = plan.owner
    tr = ss.trajectories[j]
    stages = sum(cfg.stage_cost(x, u) for x, u in zip(plan.states[:-1], plan.inputs))
    return float(stages + tr.costs[t - tr.first_t])


@dataclass(frozen=True, eq=False)
class Rollout:
    states: np.ndarray
    inputs: np.ndarray
    step_times: np.ndarray
    fallbacks: int
    infeasible: int
    kept: int = 0


def safe_mpc_rollout(
    start,
    ss: SampledSafeSet,
    qmap: CostMap,
    spec: SafetySetSpec,
    cfg: MpcConfig,
    dyn: Dynamics,
    initial_plan: Plan,
    clock=time.perf_counter,
) -> Rollout:
    """Receding-horizon loop from ``start`` until within ``terminal_tol`` of the target.

    ``initial_plan`` must start at ``start`` and end at a stored point; it
    serves as the first reference and as the first incumbent.  The shifted
    previous plan stays feasible, so it is applied whenever the fresh
    solution is infeasible, uncertified, or more expensive.  The incumbent's
    cost drops by at least the applied stage cost each step, which bounds the
    rollout cost by the initial plan's cost.
    """
    x = np.asarray(start, dtype=float)
    states, inputs, times = [x], [], []
    plan = initial_plan
    lq = _LqBound(cfg, dyn)
    fallbacks = infeasible = kept = 0
    while np.linalg.norm(x - cfg.target) > cfg.terminal_tol:
        if len(inputs) >= cfg.step_cap:
            raise NonConvergenceError(f"no convergence within {cfg.step_cap} steps")
        tick = clock()
        try:
            sol = solve_finite_horizon(x, ss, qmap, spec, cfg, dyn, plan.states, lq=lq)
            if not spec.member(sol.states[1]):
                raise InfeasibleError("next state failed the membership certificate")
            if sol.objective <= plan_cost(plan, ss, cfg) or not spec.member(plan.states[1]):
                plan = Plan(sol.states, sol.inputs, sol.terminal_owner)
            else:
                kept += 1
        except InfeasibleError as exc:
            infeasible += 1
            log.info("step %d: %s; using the shifted plan", len(inputs), exc)
            if not spec.member(plan.states[1]):
                raise InfeasibleError(
                    "fallback plan is unsafe",
                    state_dump={"x": x.tolist(), "plan": plan.states.tolist(), "t": len(inputs)},
                ) from exc
            fallbacks += 1
        u = plan.inputs[0]
        x = dyn.step(x, u)
        times.append(clock() - tick)
        states.append(x)
        inputs.append(u)
        plan = shift_plan(plan, ss, dyn)
    return Rollout(
        states=np.array(states),
        inputs=np.array(inputs).reshape(len(inputs), dyn.n_u),
        step_times=np.array(times),
        fallbacks=fallbacks,
        infeasible=infeasible,
        kept=kept,
    )
