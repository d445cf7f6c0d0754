import itertools

import numpy as np
import pytest

from drmpc.config import RunConfig
from drmpc.errors import InputError, NonConvergenceError
from drmpc.experiment import (
    build_problem,
    build_safety_spec,
    initial_robust_trajectory,
    robust_spec,
    sample_displacements,
)
from drmpc.mpc import (
    CL_WASS,
    INN_WASS,
    WASS,
    Dynamics,
    MpcConfig,
    Plan,
    SafetySetSpec,
    _LqBound,
    _Reachable,
    _Subproblem,
    compile_safety_constraints,
    plan_cost,
    safe_mpc_rollout,
    solve_finite_horizon,
)
from drmpc.risk import cvar_discrete
from drmpc.safeset import SampledSafeSet, append_trajectory, min_cost_map


@pytest.fixture(scope="module")
def problem():
    return build_problem(RunConfig())


@pytest.fixture(scope="module")
def robust(problem):
    return initial_robust_trajectory(problem)


@pytest.fixture(scope="module")
def robust_set(robust):
    ss = append_trajectory(SampledSafeSet(), 0, robust.states, robust.costs, robust.inputs)
    return ss, min_cost_map(ss)


def leading_plan(traj, cfg, dyn):
    inputs = np.zeros((cfg.horizon, dyn.n_u))
    n = min(cfg.horizon, traj.steps)
    inputs[:n] = traj.inputs[:n]
    return Plan(dyn.simulate(traj.states[0], inputs), inputs, (0, n))


def dynamics_residual(sol, dyn):
    X, U = sol.states, sol.inputs
    return np.max(np.abs(X[1:] - X[:-1] @ dyn.A.T - U @ dyn.B.T))


def test_far_left_reference_selects_left_facet(problem):
    spec = robust_spec(problem)
    ref = np.tile([-0.5, 1.2, 0.0, 0.0], (12, 1))
    compiled = compile_safety_constraints(spec, ref)
    normals = problem.obstacle.body.A[list(compiled.facets)]
    np.testing.assert_allclose(normals, np.tile([-1.0, 0.0], (10, 1)), atol=1e-12)


def test_zero_offsets_mean_outside_the_selected_facet(problem):
    obs = problem.obstacle
    bare = type(obs)(obs.body, obs.selector, 0.0)
    spec = SafetySetSpec(INN_WASS, bare, problem.support, 0.05, offsets=np.zeros(obs.body.n_facets))
    rng = np.random.default_rng(0)
    for p in rng.uniform([-1, -1.5], [7, 5.5], size=(200, 2)):
        x = np.array([*p, 0.0, 0.0])
        m = spec.inner_margins(x)
        np.testing.assert_allclose(m, obs.body.A @ p - obs.body.b, atol=1e-12)
        assert (np.max(m) > 0) == (not obs.body.contains(p))


@pytest.mark.parametrize("variant", [WASS, CL_WASS])
def test_frozen_constraint_reproduces_bound_at_reference(problem, variant):
    rng = np.random.default_rng(1)
    W = sample_displacements(problem.uncertainty, 40, rng)
    spec = build_safety_spec(problem, variant, W, 1e-3, 0)
    for p in [(1.0, 0.2), (0.9, 1.0), (3.3, 2.0), (2.0, -0.2)]:
        x = np.array([*p, 0.0, 0.0])
        B = spec.bound(x)
        assert B.frozen_value(x) == pytest.approx(B.value, abs=1e-6)
        # the compressed rows used by the MPC never undercut the frozen bound
        w, S, o = B.compressed
        for dx in rng.normal(scale=0.3, size=(10, 4)):
            y = x + dx
            assert B.radius_term + cvar_discrete(o - S @ y, w, B.beta) >= B.frozen_value(y) - 1e-12


def test_target_is_a_fixed_point(problem, robust_set):
    ss, qmap = robust_set
    cfg, dyn = problem.mpc, problem.dynamics
    target = cfg.target
    sol = solve_finite_horizon(target, ss, qmap, robust_spec(problem), cfg, dyn, np.tile(target, (cfg.horizon + 1, 1)))
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    # With R = 0.01 the cost is flat in u near zero; interior-point iterates
    # stop around |u| ~ 1e-7 once the objective is accurate to 1e-9.
    np.testing.assert_allclose(sol.inputs, 0.0, atol=1e-6)


def test_short_horizon_matches_grid_oracle(problem):
    # K = 3 with a fixed terminal state leaves u_0 free; u_1, u_2 follow from it.
    dyn = problem.dynamics
    base = problem.mpc
    cfg = MpcConfig(
        horizon=3, Q=base.Q, R=base.R, state_lower=base.state_lower, state_upper=base.state_upper,
        input_lower=base.input_lower, input_upper=base.input_upper, start=base.start, target=base.target,
    )
    x0 = np.array([4.95, 2.97, 0.01, 0.01])
    ss = append_trajectory(SampledSafeSet(), 0, np.array([cfg.target]), np.zeros(1), first_t=0)
    qmap = min_cost_map(ss)
    spec = robust_spec(problem)
    sol = solve_finite_horizon(x0, ss, qmap, spec, cfg, dyn, np.tile(x0, (4, 1)))
    assert dynamics_residual(sol, dyn) <= 1e-7

    lo, hi = cfg.input_lower.copy(), cfg.input_upper.copy()
    best = np.inf
    for _ in range(6):
        axes = [np.linspace(a, b, 81) for a, b in zip(lo, hi)]
        arg = None
        for u0 in itertools.product(*axes):
            u0 = np.array(u0)
            x1 = dyn.step(x0, u0)
            # remaining two inputs solve x3 = target exactly
            M = np.hstack([dyn.A @ dyn.B, dyn.B])
            rest = np.linalg.lstsq(M, cfg.target - dyn.A @ dyn.A @ x1, rcond=None)[0]
            u1, u2 = rest[:2], rest[2:]
            if np.any(np.abs(np.concatenate([u1, u2])) > cfg.input_upper[0] + 1e-12):
                continue
            x2 = dyn.step(x1, u1)
            if np.linalg.norm(dyn.step(x2, u2) - cfg.target) > 1e-9:
                continue
            c = cfg.stage_cost(x0, u0) + cfg.stage_cost(x1, u1) + cfg.stage_cost(x2, u2)
            if c < best:
                best, arg = c, u0
        step = (hi - lo) / 80
        lo, hi = np.maximum(cfg.input_lower, arg - 2 * step), np.minimum(cfg.input_upper, arg + 2 * step)
    assert sol.objective == pytest.approx(best, abs=1e-4)


def test_first_step_objective_bounded_by_robust_cost(problem, robust, robust_set):
    ss, qmap = robust_set
    rng = np.random.default_rng(0)
    W = sample_displacements(problem.uncertainty, problem.run.initial_samples, rng)
    spec = build_safety_spec(problem, INN_WASS, W, problem.run.theta, 0)
    plan = leading_plan(robust, problem.mpc, problem.dynamics)
    sol = solve_finite_horizon(problem.mpc.start, ss, qmap, spec, problem.mpc, problem.dynamics, plan.states)
    assert sol.objective <= robust.cost + 1e-9
    assert dynamics_residual(sol, problem.dynamics) <= 1e-7
    assert spec.member(sol.states[1])


@pytest.mark.parametrize("variant", [INN_WASS, WASS])
def test_pruned_enumeration_matches_exhaustive(problem, robust, variant):
    tail = 25
    ss = append_trajectory(SampledSafeSet(), 0, robust.states[-tail:], robust.costs[-tail:],
                           robust.inputs[-tail + 1:], first_t=0)
    qmap = min_cost_map(ss)
    assert len(qmap) <= 30
    rng = np.random.default_rng(2)
    W = sample_displacements(problem.uncertainty, 20, rng)
    spec = build_safety_spec(problem, variant, W, 1e-3, 0)
    cfg, dyn = problem.mpc, problem.dynamics
    idx = robust.states.shape[0] - tail - 6
    x = robust.states[idx]
    inputs = robust.inputs[idx:idx + cfg.horizon]
    ref = dyn.simulate(x, inputs)
    fast = solve_finite_horizon(x, ss, qmap, spec, cfg, dyn, ref)
    full = solve_finite_horizon(x, ss, qmap, spec, cfg, dyn, ref, exhaustive=True)
    assert fast.objective == pytest.approx(full.objective, rel=1e-9, abs=1e-9)
    assert fast.candidates_solved <= full.candidates_solved
    assert dynamics_residual(fast, dyn) <= 1e-7


def test_rollout_from_target_is_empty(problem, robust, robust_set):
    ss, qmap = robust_set
    cfg, dyn = problem.mpc, problem.dynamics
    plan = Plan(np.tile(cfg.target, (cfg.horizon + 1, 1)), np.zeros((cfg.horizon, 2)), (0, robust.steps))
    roll = safe_mpc_rollout(cfg.target, ss, qmap, robust_spec(problem), cfg, dyn, plan)
    assert roll.inputs.shape == (0, 2)
    np.testing.assert_array_equal(roll.states, [cfg.target])


def test_robust_rollout_improves_on_initial_trajectory(problem, robust, robust_set):
    ss, qmap = robust_set
    cfg, dyn = problem.mpc, problem.dynamics
    spec = robust_spec(problem)
    roll = safe_mpc_rollout(cfg.start, ss, qmap, spec, cfg, dyn, leading_plan(robust, cfg, dyn))
    assert np.linalg.norm(roll.states[-1] - cfg.target) <= cfg.terminal_tol
    assert roll.states.shape[0] - 1 <= cfg.step_cap
    assert all(spec.member(x) for x in roll.states)
    cost = sum(cfg.stage_cost(x, u) for x, u in zip(roll.states, roll.inputs))
    assert cost <= robust.cost + 1e-9
    assert roll.step_times.shape == (roll.inputs.shape[0],)


def test_step_cap_raises(problem, robust, robust_set):
    ss, qmap = robust_set
    base, dyn = problem.mpc, problem.dynamics
    cfg = MpcConfig(
        horizon=base.horizon, Q=base.Q, R=base.R, state_lower=base.state_lower, state_upper=base.state_upper,
        input_lower=base.input_lower, input_upper=base.input_upper, start=base.start, target=base.target,
        step_cap=3,
    )
    with pytest.raises(NonConvergenceError):
        safe_mpc_rollout(cfg.start, ss, qmap, robust_spec(problem), cfg, dyn, leading_plan(robust, cfg, dyn))


def test_dynamics_and_config_validation():
    with pytest.raises(InputError):
        Dynamics(np.eye(3), np.zeros((4, 2)))
    with pytest.raises(InputError):
        Dynamics(np.eye(2), np.array([[np.nan], [0.0]]))
    dyn = Dynamics(np.eye(2), np.eye(2))
    np.testing.assert_array_equal(dyn.simulate([0, 0], [[1, 0], [0, 1]]), [[0, 0], [1, 0], [1, 1]])
    with pytest.raises(InputError):
        MpcConfig(horizon=0, Q=np.eye(2), R=np.eye(2), state_lower=-np.ones(2), state_upper=np.ones(2),
                  input_lower=-np.ones(2), input_upper=np.ones(2), start=np.zeros(2), target=np.zeros(2))


def test_reachable_set_is_exact_on_the_input_box(problem):
    cfg, dyn = problem.mpc, problem.dynamics
    reach = _Reachable(cfg, dyn)
    rng = np.random.default_rng(4)
    x0 = np.array([1.0, 2.0, 0.3, -0.2])
    inside = [dyn.simulate(x0, rng.uniform(cfg.input_lower, cfg.input_upper, (cfg.horizon, 2)))[-1]
              for _ in range(200)]
    assert reach.mask(x0, np.array(inside)).all()
    # Bang-bang inputs aligned with a facet normal attain that facet exactly.
    center = reach.AK @ x0 + reach.offset
    for d, h in zip(reach.D, reach.h):
        K = cfg.horizon
        u = np.array([
            np.where(d @ np.linalg.matrix_power(dyn.A, K - 1 - k) @ dyn.B >= 0, cfg.input_upper, cfg.input_lower)
            for k in range(K)
        ])
        vertex = dyn.simulate(x0, u)[-1]
        assert d @ (vertex - center) == pytest.approx(h, rel=1e-9)
        assert reach.mask(x0, vertex[None])[0]
        assert not reach.mask(x0, (center + 1.01 * (vertex - center))[None])[0]


@pytest.mark.parametrize("variant", [INN_WASS, WASS])
def test_lagrangian_bound_is_below_every_candidate(problem, robust, robust_set, variant):
    ss, qmap = robust_set
    cfg, dyn = problem.mpc, problem.dynamics
    W = sample_displacements(problem.uncertainty, 20, np.random.default_rng(5))
    spec = build_safety_spec(problem, variant, W, 1e-3, 0)
    lq = _LqBound(cfg, dyn)
    t = 15
    x = robust.states[t]
    sub = _Subproblem(x, cfg, dyn, spec, compile_safety_constraints(spec, robust.states[t:t + 1 + cfg.horizon]))
    base = cfg.stage_cost(x, np.zeros(2)) + qmap.costs
    exact, multipliers = {}, []
    for i in np.flatnonzero(lq.reach.mask(x, qmap.states)):
        out = sub.solve(qmap.states[i])
        if out is not None:
            exact[i] = out[2] + qmap.costs[i]
            multipliers.append(sub.multipliers)
    assert len(exact) >= 10
    idx = np.array(sorted(exact))
    actual = np.array([exact[i] for i in idx])
    plain = base[idx] + lq.values(x, qmap.states[idx])
    assert np.all(plain <= actual)
    for mu in multipliers:
        assert np.all(mu >= 0)
        lag = base[idx] + lq.values(x, qmap.states[idx], sub.G, sub.h, mu)
        assert np.all(lag <= actual)
    # Multipliers of the optimal candidate make its own bound nearly tight.
    best = int(np.argmin(actual))
    sub.solve(qmap.states[idx[best]])
    lag = base[idx[best]] + lq.values(x, qmap.states[idx[best]][None], sub.G, sub.h, sub.multipliers)[0]
    assert actual[best] - lag <= 1e-3 * max(1.0, actual[best])


def test_plan_cost_of_leading_plan_is_the_stored_cost(problem, robust, robust_set):
    ss, _ = robust_set
    plan = leading_plan(robust, problem.mpc, problem.dynamics)
    assert plan_cost(plan, ss, problem.mpc) == pytest.approx(robust.cost, rel=1e-12)
