"""Discrete distributions, CVaR, and Wasserstein worst-case risk.

The worst-case CVaR of the collision function over a Wasserstein ball is
bounded by a second-order cone program in the multipliers
``(lambda, eta, s_l, nu_l, gamma_l)``.  Program values are reported in CVaR
units, i.e. the objective ``lambda*theta - beta*eta + sum_l s_l`` is divided
by ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

from . import conic
from .errors import InputError, NumericalError
from .geometry import ObstacleModel, Polytope, constraint_g

FACET = "facet"
EUCLIDEAN = "euclidean"

WEIGHT_TOL = 1e-12
RISK_TOL = 1e-9
# Initial active set: atoms covering this multiple of beta, plus a few more.
ACTIVE_MASS = 3.0
ACTIVE_PAD = 8


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Weighted atoms ``sum_l p_l delta_{w_l}``."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape[0] == 0:
            raise InputError("distribution has no atoms")
        if atoms.shape[0] != weights.size:
            raise InputError("atoms and weights differ in length")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(weights))):
            raise InputError("distribution contains NaN or Inf")
        if np.any(weights <= 0):
            raise InputError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL * max(1, weights.size):
            raise InputError(f"weights sum to {weights.sum():.15g}, not 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empirical(cls, samples) -> "DiscreteDistribution":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n = samples.shape[0]
        return cls(samples, np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def check_support(self, support: Polytope, tol: float = 1e-9) -> None:
        viol = self.atoms @ support.A.T - support.b
        if viol.size and viol.max() > tol:
            raise InputError(f"atom outside the support set (violation {viol.max():.3e})")


@dataclass(frozen=True)
class AmbiguitySet:
    """Wasserstein ball of radius ``radius`` around ``center``."""

    center: DiscreteDistribution
    radius: float

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius >= 0):
            raise InputError("ambiguity radius must be a finite nonnegative number")


@dataclass(frozen=True)
class RiskParams:
    beta: float

    def __post_init__(self):
        _check_beta(self.beta, allow_one=False)


def _check_beta(beta, allow_one=True):
    upper_ok = beta <= 1 if allow_one else beta < 1
    if not (np.isfinite(beta) and beta > 0 and upper_ok):
        raise InputError(f"beta must lie in (0, 1{']' if allow_one else ')'}, got {beta}")


def cvar_discrete(values, weights, beta: float) -> float:
    """CVaR at level ``beta`` of a discrete random variable.

    Sorts outcomes in decreasing order and averages the top ``beta`` of
    probability mass; this is the minimizer of ``t + E[Z - t]_+ / beta``.
    """
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.size == 0:
        raise InputError("cvar of an empty list")
    if values.size != weights.size:
        raise InputError("values and weights differ in length")
    _check_beta(beta)
    order = np.argsort(-values, kind="stable")
    v, p = values[order], weights[order]
    before = np.concatenate([[0.0], np.cumsum(p)[:-1]])
    take = np.clip(beta - before, 0.0, p)
    return float(take @ v / beta)


def _value_at_risk(values, weights, beta):
    """Upper ``beta``-quantile: the minimizing ``t`` in the CVaR formula."""
    order = np.argsort(-values, kind="stable")
    cum = np.cumsum(weights[order])
    k = min(int(np.searchsorted(cum, beta - 1e-15)), values.size - 1)
    return float(values[order][k])


def _cvar_rows(values, weights, beta):
    """Row-wise CVaR for 2-D arrays of outcomes/weights (used by the lower-bound oracle)."""
    order = np.argsort(-values, axis=1, kind="stable")
    v = np.take_along_axis(values, order, axis=1)
    p = np.take_along_axis(weights, order, axis=1)
    before = np.cumsum(p, axis=1) - p
    take = np.clip(beta - before, 0.0, p)
    return np.sum(take * v, axis=1) / beta


def wasserstein_discrete(mu: DiscreteDistribution, nu: DiscreteDistribution) -> float:
    """1-Wasserstein distance (Euclidean ground cost) by the transport LP."""
    if mu.dim != nu.dim:
        raise InputError("distributions live in different dimensions")
    n, m = len(mu), len(nu)
    cost = np.linalg.norm(mu.atoms[:, None, :] - nu.atoms[None, :, :], axis=2)
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


@dataclass(frozen=True, eq=False)
class WorstCaseBound:
    """Optimal value and multipliers of the worst-case CVaR bound at a state.

    ``slopes`` and ``offsets`` describe the bound with all multipliers except
    ``(eta, s)`` frozen: for any state ``x`` the quantity
    :meth:`frozen_value` upper-bounds the bound program at ``x`` and equals
    ``value`` at the state where the multipliers were computed.  Atom ``l``
    uses the multipliers computed for atom ``donor[l]``.
    """

    value: float
    lam: float
    eta: float
    s: np.ndarray
    nu: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray
    beta: float
    radius: float
    slopes: np.ndarray
    offsets: np.ndarray
    donor: np.ndarray | None = None

    @property
    def radius_term(self) -> float:
        return self.lam * self.radius / self.beta

    def frozen_value(self, x) -> float:
        kappa = self.offsets - self.slopes @ np.asarray(x, dtype=float)
        return self.radius_term + cvar_discrete(kappa, self.weights, self.beta)

    @cached_property
    def compressed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(weights, slopes, offsets)`` with borrowing atoms merged per donor.

        Borrowers of one donor share its slope, so replacing them by a single
        atom at their largest offset raises every outcome pointwise.  The
        CVaR of the merged atoms therefore upper-bounds :meth:`frozen_value`.
        """
        if self.donor is None:
            return self.weights, self.slopes, self.offsets
        own = self.donor == np.arange(self.donor.size)
        kept = np.flatnonzero(own)
        borrowers = np.flatnonzero(~own)
        if borrowers.size == 0:
            return self.weights, self.slopes, self.offsets
        groups, inv = np.unique(self.donor[borrowers], return_inverse=True)
        w = np.bincount(inv, weights=self.weights[borrowers], minlength=groups.size)
        off = np.full(groups.size, -np.inf)
        np.maximum.at(off, inv, self.offsets[borrowers])
        return (
            np.concatenate([self.weights[kept], w]),
            np.vstack([self.slopes[kept], self.slopes[groups]]),
            np.concatenate([self.offsets[kept], off]),
        )


def _validate(amb: AmbiguitySet, beta, obs: ObstacleModel, support: Polytope):
    _check_beta(beta)
    if amb.center.dim != obs.body.dim or support.dim != obs.body.dim:
        raise InputError("displacement dimension mismatch between obstacle, support and data")
    amb.center.check_support(support)


def _bound_multipliers(p, gaps, wslack, beta, radius, obs, support, distance, tol):
    """Solve the bound program on the given atoms; returns projected ``(nu, gamma)``."""
    L, M = gaps.shape
    A, H = obs.body.A, support.A
    n_p, nH = A.shape[1], H.shape[0]

    bld = conic.ConicBuilder()
    lam = bld.variables(1, conic.NONNEG)[0]
    eta = bld.variables(1)[0]
    s = bld.variables(L, conic.NONNEG)
    nu = bld.variables(L * M, conic.NONNEG).reshape(L, M)
    gam = bld.variables(L * nH, conic.NONNEG).reshape(L, nH)
    cones = np.array([bld.variables(1 + n_p, conic.SOC) for _ in range(L)])

    ell = np.arange(L)
    # -s_l/p_l + eta - nu_l^T gaps_l - gamma_l^T (H w_l - h) <= -clearance
    rows = np.concatenate([ell, ell, np.repeat(ell, M), np.repeat(ell, nH)])
    cols = np.concatenate([s, np.full(L, eta), nu.ravel(), gam.ravel()])
    vals = np.concatenate([-1.0 / p, np.ones(L), -gaps.ravel(), -wslack.ravel()])
    bld.add_triplets(rows, cols, vals, np.full(L, -obs.clearance), inequality=True)

    # cone_l = (lambda, A^T nu_l - H^T gamma_l)
    bld.add_triplets(np.concatenate([ell, ell]), np.concatenate([cones[:, 0], np.full(L, lam)]),
                     np.concatenate([np.ones(L), -np.ones(L)]), np.zeros(L))
    _link_directions(bld, cones[:, 1:], nu, A, gam, H)

    if distance == FACET:
        bld.add_triplets(np.repeat(ell, M), nu.ravel(), np.ones(L * M), np.ones(L), inequality=True)
    else:
        unit = np.array([bld.variables(1 + n_p, conic.SOC) for _ in range(L)])
        bld.add_triplets(ell, unit[:, 0], np.ones(L), np.ones(L))
        _link_directions(bld, unit[:, 1:], nu, A, None, H)

    bld.add_objective(lam, radius / beta)
    bld.add_objective(eta, -1.0)
    bld.add_objective(s, 1.0 / beta)
    prog = bld.build()
    sol = conic.solve(prog, tol=tol)
    if not sol.ok:
        raise NumericalError(
            f"worst-case CVaR program failed with status {sol.status}", residuals=sol.residuals, dump=prog
        )
    z = sol.primal
    # Project the multipliers back onto their feasible sets; the caller
    # recomputes the objective in closed form, so the value stays a genuine bound.
    nu_v = np.maximum(z[nu], 0.0)
    gam_v = np.maximum(z[gam], 0.0)
    if distance == FACET:
        nu_v /= np.maximum(nu_v.sum(axis=1), 1.0)[:, None]
    else:
        nu_v /= np.maximum(np.linalg.norm(nu_v @ A, axis=1), 1.0)[:, None]
    return nu_v, gam_v


def worst_case_cvar_ub(
    amb: AmbiguitySet,
    beta: float,
    x,
    obs: ObstacleModel,
    support: Polytope,
    distance: str = FACET,
    tol: float = RISK_TOL,
) -> WorstCaseBound:
    """Upper bound on ``sup_Q CVaR_beta[g(x, w)]`` over the Wasserstein ball.

    Every atom carries its own facet multiplier ``nu_l``; ``distance``
    selects the multiplier set matching the distance inside ``g``:
    ``'facet'`` uses ``{nu >= 0, sum nu <= 1}`` (facet-max distance),
    ``'euclidean'`` uses ``{nu >= 0, ||A^T nu|| <= 1}``.

    Only atoms that can reach the CVaR tail enter the conic program.  Every
    other atom borrows the multipliers of the kept atom giving it the lowest
    value; if one of them would still enter the tail it joins the program
    and the solve repeats.  The reduced program is a relaxation, so once no
    borrower enters the tail the completed multipliers are optimal.
    """
    _validate(amb, beta, obs, support)
    if distance not in (FACET, EUCLIDEAN):
        raise InputError(f"unknown distance mode {distance!r}")
    x = np.asarray(x, dtype=float).ravel()
    W, p = amb.center.atoms, amb.center.weights
    L = W.shape[0]
    A, b = obs.body.A, obs.body.b
    H, h = support.A, support.b

    gaps = obs.facet_gaps(x, W)            # (L, M): A (C x - w_l) - b
    wslack = W @ H.T - h                   # (L, nH): H w_l - h  (<= 0)

    # Seed the program with the atoms that are worst at zero radius.
    proxy = obs.clearance - np.maximum(gaps.max(axis=1), 0.0)
    order = np.argsort(-proxy, kind="stable")
    n_seed = int(np.searchsorted(np.cumsum(p[order]), min(1.0, ACTIVE_MASS * beta) - 1e-15)) + 1 + ACTIVE_PAD
    active = np.sort(order[:n_seed])

    while True:
        nu_a, gam_a = _bound_multipliers(
            p[active], gaps[active], wslack[active], beta, amb.radius, obs, support, distance, tol
        )
        donor = np.arange(L)
        nu_v = np.zeros((L, A.shape[0]))
        gam_v = np.zeros((L, H.shape[0]))
        nu_v[active], gam_v[active] = nu_a, gam_a
        dropped = np.setdiff1d(donor, active, assume_unique=True)
        if dropped.size:
            # kappa_l under atom k's multipliers: kappa_k + G_k . (w_l - w_k)
            G = nu_a @ A - gam_a @ H
            kap_a = obs.clearance - np.einsum("lm,lm->l", nu_a, gaps[active]) - np.einsum("lk,lk->l", gam_a, wslack[active])
            cand = kap_a[None, :] + W[dropped] @ G.T - np.einsum("lj,lj->l", G, W[active])[None, :]
            best = np.argmin(cand, axis=1)
            donor[dropped] = active[best]
            nu_v[dropped], gam_v[dropped] = nu_a[best], gam_a[best]

        slopes = nu_v @ A @ obs.selector
        offsets = obs.clearance + np.einsum("lm,lm->l", nu_v, b[None, :] + W @ A.T) - np.einsum("lk,lk->l", gam_v, wslack)
        kappa = offsets - slopes @ x
        if not dropped.size:
            break
        threshold = _value_at_risk(kappa[active], p[active], beta)
        entering = dropped[kappa[dropped] > threshold]
        if not entering.size:
            break
        active = np.union1d(active, entering)

    lam_v = float(np.max(np.linalg.norm(nu_v @ A - gam_v @ H, axis=1)))
    cvar = cvar_discrete(kappa, p, beta)
    eta_v = -_value_at_risk(kappa, p, beta)
    return WorstCaseBound(
        value=lam_v * amb.radius / beta + cvar,
        lam=lam_v,
        eta=eta_v,
        s=p * np.maximum(kappa + eta_v, 0.0),
        nu=nu_v,
        gamma=gam_v,
        weights=p,
        beta=beta,
        radius=amb.radius,
        slopes=slopes,
        offsets=offsets,
        donor=donor,
    )


def _link_directions(bld, cone_tail, nu, A, gam, H):
    """Rows ``cone_tail_l - A^T nu_l (+ H^T gamma_l) = 0`` for every atom."""
    L, n_p = cone_tail.shape
    M = A.shape[0]
    r = np.arange(L * n_p).reshape(L, n_p)
    rows = [r.ravel()]
    cols = [cone_tail.ravel()]
    vals = [np.ones(L * n_p)]
    # entry (l, j) gets -sum_m A[m, j] nu[l, m]
    rows.append(np.repeat(r, M, axis=1).ravel())
    cols.append(np.tile(nu, (1, n_p)).ravel())
    vals.append(np.tile(-A.T.ravel(), L))
    if gam is not None:
        nH = H.shape[0]
        rows.append(np.repeat(r, nH, axis=1).ravel())
        cols.append(np.tile(gam, (1, n_p)).ravel())
        vals.append(np.tile(H.T.ravel(), L))
    bld.add_triplets(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), np.zeros(L * n_p))


def member_x_wass(x, amb, beta, obs, support, tol: float = 1e-6, distance: str = FACET) -> bool:
    """``True`` iff the worst-case CVaR bound at ``x`` is at most ``tol``."""
    return worst_case_cvar_ub(amb, beta, x, obs, support, distance).value <= tol


def inner_offsets(
    amb: AmbiguitySet,
    beta: float,
    obs: ObstacleModel,
    support: Polytope,
    tol: float = RISK_TOL,
) -> np.ndarray:
    """Worst-case CVaR of ``A_m^T w`` over the ball, one value per obstacle facet."""
    _validate(amb, beta, obs, support)
    W, p = amb.center.atoms, amb.center.weights
    L, n_p = W.shape
    H, h = support.A, support.b
    nH = H.shape[0]
    wslack = W @ H.T - h
    out = np.empty(obs.body.n_facets)
    ell = np.arange(L)
    for m, a in enumerate(obs.body.A):
        bld = conic.ConicBuilder()
        lam = bld.variables(1, conic.NONNEG)[0]
        eta = bld.variables(1)[0]
        s = bld.variables(L, conic.NONNEG)
        xi = bld.variables(L * nH, conic.NONNEG).reshape(L, nH)
        cones = np.array([bld.variables(1 + n_p, conic.SOC) for _ in range(L)])
        # -s_l/p_l + eta - xi_l^T (H w_l - h) <= -A_m^T w_l
        rows = np.concatenate([ell, ell, np.repeat(ell, nH)])
        cols = np.concatenate([s, np.full(L, eta), xi.ravel()])
        vals = np.concatenate([-1.0 / p, np.ones(L), -wslack.ravel()])
        bld.add_triplets(rows, cols, vals, -(W @ a), inequality=True)
        bld.add_triplets(np.concatenate([ell, ell]), np.concatenate([cones[:, 0], np.full(L, lam)]),
                         np.concatenate([np.ones(L), -np.ones(L)]), np.zeros(L))
        # cone tail_l + H^T xi_l = A_m
        r = np.arange(L * n_p).reshape(L, n_p)
        bld.add_triplets(
            np.concatenate([r.ravel(), np.repeat(r, nH, axis=1).ravel()]),
            np.concatenate([cones[:, 1:].ravel(), np.tile(xi, (1, n_p)).ravel()]),
            np.concatenate([np.ones(L * n_p), np.tile(H.T.ravel(), L)]),
            np.tile(a, L),
        )
        bld.add_objective(lam, amb.radius / beta)
        bld.add_objective(eta, -1.0)
        bld.add_objective(s, 1.0 / beta)
        prog = bld.build()
        sol = conic.solve(prog, tol=tol)
        if not sol.ok:
            raise NumericalError(
                f"inner offset program for facet {m} failed with status {sol.status}",
                residuals=sol.residuals,
                dump=prog,
            )
        out[m] = sol.objective
    return out


def worst_case_cvar_lb_oracle(
    amb: AmbiguitySet,
    beta: float,
    x,
    obs: ObstacleModel,
    support: Polytope,
    grid_resolution: float,
    max_moves: int = 6,
) -> float:
    """Lower bound on the worst-case CVaR by explicit mass transport.

    Starting from the ball's center, mass is greedily moved from atoms to grid
    points of the support where ``g`` is large, never spending more than the
    Wasserstein budget.  Each candidate is a feasible member of the ball, so
    its exact CVaR is a valid lower bound; the best one is returned.
    """
    _validate(amb, beta, obs, support)
    if not grid_resolution > 0:
        raise InputError("grid_resolution must be positive")
    grid = support.grid(grid_resolution)
    g_grid = constraint_g(x, grid, obs)
    src_pts = amb.center.atoms
    src_g = constraint_g(x, src_pts, obs)

    values = list(src_g)
    masses = list(amb.center.weights)
    n_src = len(src_g)
    best = cvar_discrete(values, masses, beta)
    budget = amb.radius
    if budget <= 0:
        return best

    for _ in range(max_moves):
        if budget <= 1e-15:
            break
        vals_arr = np.asarray(values)
        mass_arr = np.asarray(masses)
        top_val, top_move = best, None
        for i in range(n_src):
            if mass_arr[i] <= 1e-15:
                continue
            dist = np.linalg.norm(grid - src_pts[i], axis=1)
            gain_mask = g_grid > vals_arr[i]
            if not np.any(gain_mask):
                continue
            tg, td = g_grid[gain_mask], dist[gain_mask]
            with np.errstate(divide="ignore"):
                reach = np.where(td > 0, budget / td, np.inf)
            for cap in (mass_arr[i], min(mass_arr[i], beta)):
                m = np.minimum(cap, reach)
                k = tg.size
                cand_v = np.tile(vals_arr, (k, 1))
                cand_p = np.tile(mass_arr, (k, 1))
                cand_p[:, i] -= m
                cand_v = np.column_stack([cand_v, tg])
                cand_p = np.column_stack([np.maximum(cand_p, 0.0), m])
                scores = _cvar_rows(cand_v, cand_p, beta)
                j = int(np.argmax(scores))
                if scores[j] > top_val + 1e-14:
                    top_val = float(scores[j])
                    top_move = (i, float(tg[j]), float(m[j]), float(m[j] * td[j]))
        if top_move is None:
            break
        i, gval, m, cost = top_move
        masses[i] = max(masses[i] - m, 0.0)
        values.append(gval)
        masses.append(m)
        budget -= cost
        best = top_val
    return best
