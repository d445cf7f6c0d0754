"""Iterative driver: sampling, safety-set construction, rollouts, safe-set updates."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import cluster, inflated_ambiguity
from .config import RunConfig
from .errors import ConfigurationError, InputError
from .geometry import ObstacleModel, Polytope, constraint_g
from .mpc import (
    CL_WASS,
    INN_WASS,
    WASS,
    Dynamics,
    MpcConfig,
    Plan,
    SafetySetSpec,
    compile_safety_constraints,
    safe_mpc_rollout,
    solve_fixed_terminal,
)
from .risk import AmbiguitySet, DiscreteDistribution, inner_offsets
from .safeset import SampledSafeSet, append_trajectory, cost_to_go, min_cost_map, prune

log = logging.getLogger(__name__)

CLI_VARIANTS = {"wass": WASS, "cl-wass": CL_WASS, "inn": INN_WASS}


@dataclass(frozen=True, eq=False)
class UncertaintyModel:
    """Independent per-axis zero-mean normals truncated to a box support."""

    support: Polytope
    sigma: float
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError("sigma must be positive")
        lo, hi = self.support.bounds
        if np.any(self.lower < lo - 1e-12) or np.any(self.upper > hi + 1e-12):
            raise InputError("truncation bounds must lie within the support box")

    @classmethod
    def box(cls, half_width: float, sigma: float, dim: int = 2) -> "UncertaintyModel":
        lo, hi = -np.full(dim, half_width), np.full(dim, half_width)
        return cls(Polytope.box(lo, hi), sigma, lo, hi)


def sample_displacements(model: UncertaintyModel, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. draws; each axis is rejection-sampled independently."""
    if count < 0:
        raise InputError("count must be nonnegative")
    dim = model.lower.size
    out = np.empty((count, dim))
    for i in range(count):
        for a in range(dim):
            while True:
                v = rng.normal(0.0, model.sigma)
                if model.lower[a] <= v <= model.upper[a]:
                    out[i, a] = v
                    break
    return out


@dataclass(frozen=True, eq=False)
class Problem:
    """Objects derived from a :class:`RunConfig`."""

    run: RunConfig
    dynamics: Dynamics
    mpc: MpcConfig
    obstacle: ObstacleModel
    uncertainty: UncertaintyModel

    @property
    def support(self) -> Polytope:
        return self.uncertainty.support


def build_problem(run: RunConfig) -> Problem:
    dyn = Dynamics(np.array(run.A), np.array(run.B))
    mpc = MpcConfig(
        horizon=run.horizon,
        Q=np.diag(run.Q_diag),
        R=np.diag(run.R_diag),
        state_lower=np.array(run.state_lower),
        state_upper=np.array(run.state_upper),
        input_lower=np.array(run.input_lower),
        input_upper=np.array(run.input_upper),
        start=np.array(run.x_start),
        target=np.array(run.x_target),
        terminal_tol=run.terminal_tol,
        step_cap=run.step_cap,
        rounds=run.convexification_rounds,
        tol=run.solver_tol,
    )
    selector = np.hstack([np.eye(2), np.zeros((2, 2))])
    obstacle = ObstacleModel(Polytope.square(run.obstacle_center, run.obstacle_side), selector, run.clearance)
    unc = UncertaintyModel.box(run.support_half_width, run.sigma)
    _check_obstacle_inside(obstacle, unc.support, mpc)
    return Problem(run, dyn, mpc, obstacle, unc)


def _check_obstacle_inside(obs, support, mpc):
    """Every displaced obstacle must stay inside the position box."""
    corners = obs.body.vertices()
    shifts = support.vertices()
    pts = (corners[:, None, :] + shifts[None, :, :]).reshape(-1, 2)
    lo, hi = mpc.state_lower[:2], mpc.state_upper[:2]
    if np.any(pts < lo) or np.any(pts > hi):
        raise ConfigurationError("displaced obstacle leaves the position box")


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray

    @property
    def cost(self) -> float:
        return float(self.costs[0])

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def robust_spec(problem: Problem) -> SafetySetSpec:
    """Half-space set that is safe for every displacement in the support."""
    offsets = problem.support.support_many(problem.obstacle.body.A)
    return SafetySetSpec(INN_WASS, problem.obstacle, problem.support, problem.run.beta, offsets=offsets)


def _reference_paths(problem: Problem, T: int) -> list[np.ndarray]:
    start, target = problem.mpc.start, problem.mpc.target
    body = problem.obstacle.body
    grow = problem.support.support_many(body.A) + problem.obstacle.clearance
    inflated = Polytope(body.A, body.b + grow)
    center = inflated.vertices().mean(axis=0)
    waypoints = [[]]
    for v in inflated.vertices():
        waypoints.append([center + 1.1 * (v - center)])
    paths = []
    for mids in waypoints:
        pts = np.array([start[:2], *mids, target[:2]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        grid = np.linspace(0.0, s[-1], T + 1)
        pos = np.column_stack([np.interp(grid, s, pts[:, i]) for i in range(2)])
        paths.append(np.hstack([pos, np.zeros((T + 1, 2))]))
    return paths


def initial_robust_trajectory(problem: Problem, horizon: int | None = None, max_passes: int = 10) -> Trajectory:
    """Cheapest trajectory from start to target that is safe for every displacement.

    Facet assignments are seeded from a straight path and from detours via
    each corner of the inflated obstacle, then refined by re-assigning at the
    latest solution until the assignment repeats.

    Raises:
        ConfigurationError: If no seed leads to a feasible robust plan.
    """
    T = horizon or problem.run.robust_horizon
    mpc = problem.mpc
    cfg = MpcConfig(
        horizon=T, Q=mpc.Q, R=mpc.R, state_lower=mpc.state_lower, state_upper=mpc.state_upper,
        input_lower=mpc.input_lower, input_upper=mpc.input_upper, start=mpc.start, target=mpc.target,
        terminal_tol=mpc.terminal_tol, tol=mpc.tol,
    )
    spec = robust_spec(problem)
    best = None
    for ref in _reference_paths(problem, T):
        seen = set()
        for _ in range(max_passes):
            compiled = compile_safety_constraints(spec, ref)
            if compiled.facets in seen:
                break
            seen.add(compiled.facets)
            out = solve_fixed_terminal(mpc.start, cfg, problem.dynamics, spec, compiled, mpc.target)
            if out is None:
                break
            states, inputs, cost = out
            if best is None or cost < best[2] - 1e-12:
                best = (states, inputs, cost)
            ref = states
    if best is None:
        raise ConfigurationError("no robustly safe initial trajectory found")
    states, inputs, _ = best
    _verify_robust(problem, states)
    costs = cost_to_go(states, inputs, mpc.Q, mpc.R, mpc.target, mpc.terminal_tol)
    return Trajectory(states, inputs, costs)


def _verify_robust(problem: Problem, states):
    worst = max(float(np.max(constraint_g(x, problem.support.vertices(), problem.obstacle))) for x in states)
    if worst > 1e-7:
        raise ConfigurationError(f"robust trajectory violates the collision constraint (g = {worst:.3e})")


def cluster_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence((seed, j)).generate_state(1)[0])


def build_safety_spec(problem: Problem, variant: str, samples, theta: float, seed: int) -> SafetySetSpec:
    """Safety set from the current dataset (the per-iteration map from data to set)."""
    run = problem.run
    emp = DiscreteDistribution.empirical(samples)
    if variant == WASS:
        amb = AmbiguitySet(emp, theta)
    elif variant == CL_WASS:
        k = min(run.n_clusters, len(emp))
        cd = cluster(samples, k, seed, support=problem.support, n_init=run.kmeans_restarts)
        amb = inflated_ambiguity(cd, theta)
    elif variant == INN_WASS:
        offsets = inner_offsets(AmbiguitySet(emp, theta), run.beta, problem.obstacle, problem.support)
        return SafetySetSpec(INN_WASS, problem.obstacle, problem.support, run.beta, offsets=offsets)
    else:
        raise InputError(f"unknown variant {variant!r}")
    return SafetySetSpec(variant, problem.obstacle, problem.support, run.beta, ambiguity=amb)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    trajectory: Trajectory
    step_times: np.ndarray
    samples_gathered: int
    total_samples: int
    build_time: float
    pruned: tuple
    fallbacks: int
    infeasible: int
    certified: bool

    @property
    def cost(self) -> float:
        return self.trajectory.cost

    @property
    def mean_step_time(self) -> float:
        return float(np.mean(self.step_times)) if self.step_times.size else 0.0

    @property
    def total_time(self) -> float:
        return float(np.sum(self.step_times))


@dataclass(eq=False)
class ExperimentResult:
    variant: str
    seed: int
    robust: Trajectory
    records: list = field(default_factory=list)
    safe_set: SampledSafeSet | None = None
    samples: np.ndarray | None = None


def _initial_plan(ss: SampledSafeSet, trajectories: dict, cfg: MpcConfig, dyn: Dynamics) -> Plan:
    """First ``K`` steps of the cheapest surviving trajectory."""
    i = min(ss.active, key=lambda j: (trajectories[j].cost, j))
    tr = trajectories[i]
    K = cfg.horizon
    inputs = np.zeros((K, dyn.n_u))
    n = min(K, tr.steps)
    inputs[:n] = tr.inputs[:n]
    return Plan(dyn.simulate(tr.states[0], inputs), inputs, (i, n))


def make_clock(timing: str):
    if timing == "off":
        return lambda: 0.0
    return time.perf_counter


def run_iterations(
    problem: Problem,
    variant: str,
    seed: int,
    iterations: int | None = None,
    checkpoint: str | Path | None = None,
    clock=None,
    on_iteration=None,
) -> ExperimentResult:
    """Run the iterative scheme for one safety-set variant.

    Args:
        problem: Built problem.
        variant: One of ``wass``, ``cl_wass``, ``inn_wass``.
        seed: Seed for displacement sampling and clustering.
        iterations: Number of iterations (defaults to the config value).
        checkpoint: If given, a JSON checkpoint is written there after every
            iteration, and an existing checkpoint for the same variant and seed
            is resumed.
        clock: Zero-argument timer; defaults to the config's timing mode.
        on_iteration: Optional callback receiving each :class:`IterationRecord`.

    Returns:
        The per-iteration records with the final safe set and dataset.
    """
    run = problem.run
    J = iterations or run.iterations
    clock = clock or make_clock(run.timing)
    rng = np.random.default_rng(seed)
    robust = initial_robust_trajectory(problem)
    result = ExperimentResult(variant, seed, robust)
    trajectories = {0: robust}

    start_j = 1
    ckpt = Path(checkpoint) if checkpoint else None
    if ckpt is not None and ckpt.exists():
        start_j, ss, samples = _load_checkpoint(ckpt, result, trajectories, rng, variant, seed)
    else:
        samples = sample_displacements(problem.uncertainty, run.initial_samples, rng)
        ss = append_trajectory(SampledSafeSet(), 0, robust.states, robust.costs, robust.inputs)
    spec = build_safety_spec(problem, variant, samples, run.theta_at(start_j - 1), cluster_seed(seed, start_j - 1))

    for j in range(start_j, J + 1):
        qmap = min_cost_map(ss)
        plan = _initial_plan(ss, trajectories, problem.mpc, problem.dynamics)
        roll = safe_mpc_rollout(problem.mpc.start, ss, qmap, spec, problem.mpc, problem.dynamics, plan, clock=clock)
        certified = all(spec.member(x) for x in roll.states)
        costs = cost_to_go(roll.states, roll.inputs, problem.mpc.Q, problem.mpc.R, problem.mpc.target,
                           problem.mpc.terminal_tol)
        traj = Trajectory(roll.states, roll.inputs, costs)
        trajectories[j] = traj

        new = sample_displacements(problem.uncertainty, traj.steps, rng)
        samples = np.vstack([samples, new])
        tick = clock()
        spec = build_safety_spec(problem, variant, samples, run.theta_at(j), cluster_seed(seed, j))
        ss = append_trajectory(ss, j, traj.states, traj.costs, traj.inputs)
        before = set(ss.active)
        ss = prune(ss, spec.member)
        build_time = clock() - tick
        rec = IterationRecord(
            iteration=j,
            trajectory=traj,
            step_times=roll.step_times,
            samples_gathered=traj.steps,
            total_samples=samples.shape[0],
            build_time=build_time,
            pruned=tuple(sorted(before - set(ss.active))),
            fallbacks=roll.fallbacks,
            infeasible=roll.infeasible,
            certified=certified,
        )
        result.records.append(rec)
        log.info("%s iteration %d: T=%d cost=%.6f pruned=%s", variant, j, traj.steps, traj.cost, rec.pruned)
        if on_iteration:
            on_iteration(rec)
        if ckpt is not None:
            _save_checkpoint(ckpt, result, ss, samples, rng, j)
    result.safe_set = ss
    result.samples = samples
    return result


def _record_to_dict(rec: IterationRecord) -> dict:
    return {
        "iteration": rec.iteration,
        "states": rec.trajectory.states.tolist(),
        "inputs": rec.trajectory.inputs.tolist(),
        "costs": rec.trajectory.costs.tolist(),
        "step_times": rec.step_times.tolist(),
        "samples_gathered": rec.samples_gathered,
        "total_samples": rec.total_samples,
        "build_time": rec.build_time,
        "pruned": list(rec.pruned),
        "fallbacks": rec.fallbacks,
        "infeasible": rec.infeasible,
        "certified": rec.certified,
    }


def _record_from_dict(d: dict) -> IterationRecord:
    states = np.array(d["states"], dtype=float)
    inputs = np.array(d["inputs"], dtype=float).reshape(states.shape[0] - 1, -1)
    traj = Trajectory(states, inputs, np.array(d["costs"], dtype=float))
    return IterationRecord(
        iteration=d["iteration"], trajectory=traj, step_times=np.array(d["step_times"]),
        samples_gathered=d["samples_gathered"], total_samples=d["total_samples"], build_time=d["build_time"],
        pruned=tuple(d["pruned"]), fallbacks=d["fallbacks"], infeasible=d["infeasible"], certified=d["certified"],
    )


def _save_checkpoint(path: Path, result: ExperimentResult, ss, samples, rng, j):
    doc = {
        "variant": result.variant,
        "seed": result.seed,
        "iteration": j,
        "safe_set": ss.to_dict(),
        "samples": samples.tolist(),
        "rng_state": rng.bit_generator.state,
        "records": [_record_to_dict(r) for r in result.records],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _load_checkpoint(path: Path, result, trajectories, rng, variant, seed):
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc["variant"] != variant or doc["seed"] != seed:
        raise ConfigurationError(f"checkpoint {path} belongs to another run")
    rng.bit_generator.state = doc["rng_state"]
    for d in doc["records"]:
        rec = _record_from_dict(d)
        result.records.append(rec)
        trajectories[rec.iteration] = rec.trajectory
    return doc["iteration"] + 1, SampledSafeSet.from_dict(doc["safe_set"]), np.array(doc["samples"])
