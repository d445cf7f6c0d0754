"""Acceptance criteria 1-9; each test is tagged with the criterion it checks."""

import time

import numpy as np
import pytest

from drmpc import conic
from drmpc.cli import EXIT_OK, main
from drmpc.clustering import cluster, inflated_ambiguity
from drmpc.config import RunConfig
from drmpc.experiment import build_problem, run_iterations
from drmpc.geometry import ObstacleModel, Polytope, constraint_g
from drmpc.mpc import CL_WASS, INN_WASS, WASS
from drmpc.risk import (
    AmbiguitySet,
    DiscreteDistribution,
    inner_offsets,
    member_x_wass,
    worst_case_cvar_lb_oracle,
    worst_case_cvar_ub,
)
from drmpc.safeset import SampledSafeSet, append_trajectory, cost_to_go, min_cost_map, prune

from test_conic import dense_grid_minimizer, infeasible_program, qp_program, soc_norm_program

RUN = RunConfig()
PROBLEM = build_problem(RUN)
OBS = PROBLEM.obstacle
SUPPORT = PROBLEM.support
BETA = RUN.beta
VARIANTS = (INN_WASS, CL_WASS, WASS)


def cvar_oracle(values, beta):
    """``min_t t + mean((Z - t)_+) / beta`` over outcome values (uniform weights)."""
    values = np.asarray(values, dtype=float)
    return min(t + np.mean(np.maximum(values - t, 0.0)) / beta for t in values)


def truncated(rng, n):
    W = rng.normal(0, RUN.sigma, size=(4 * n, 2))
    return W[np.all(np.abs(W) <= RUN.support_half_width, axis=1)][:n]


def random_states(rng, n):
    """Half uniform over the position box, half concentrated around the obstacle."""
    lo, hi = PROBLEM.mpc.state_lower[:2], PROBLEM.mpc.state_upper[:2]
    near = rng.uniform([0.6, -0.4], [3.4, 2.8], size=(n - n // 2, 2))
    far = rng.uniform(lo, hi, size=(n // 2, 2))
    pos = np.vstack([near, far])
    return np.hstack([pos, np.zeros((n, 2))])


# ---- 1 -----------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_zero_radius_exactness(note):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for x in random_states(rng, 50):
        W = truncated(rng, 5)
        ub = worst_case_cvar_ub(AmbiguitySet(DiscreteDistribution.empirical(W), 0.0), BETA, x, OBS, SUPPORT)
        worst = max(worst, abs(ub.value - cvar_oracle(constraint_g(x, W, OBS), BETA)))
    elapsed = time.perf_counter() - t0
    note(f"max error {worst:.1e}, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 60


# ---- 2 -----------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_bracket_soundness(note):
    rng = np.random.default_rng(202)
    worst = -np.inf
    for i, x in enumerate(random_states(rng, 20)):
        W = truncated(rng, 5)
        for theta in (1e-3, 0.05, 0.2):
            amb = AmbiguitySet(DiscreteDistribution.empirical(W), theta)
            ub = worst_case_cvar_ub(amb, BETA, x, OBS, SUPPORT).value
            lb = worst_case_cvar_lb_oracle(amb, BETA, x, OBS, SUPPORT, grid_resolution=0.05)
            worst = max(worst, lb - ub)
    note(f"max lb - ub {worst:.1e}")
    assert worst <= 1e-7


@pytest.mark.criterion(2)
def test_bracket_gap_one_dimensional(note):
    obs = ObstacleModel(Polytope.box([-0.5], [0.5]), np.array([[1.0, 0.0]]), 0.3)
    sup = Polytope.box([-0.45], [0.45])
    rng = np.random.default_rng(203)
    gaps = []
    for _ in range(6):
        W = np.clip(rng.normal(0, 0.15, size=(4, 1)), -0.45, 0.45)
        for theta in (1e-3, 0.05, 0.2):
            amb = AmbiguitySet(DiscreteDistribution.empirical(W), theta)
            for px in (0.9, 1.1, 1.4):
                x = np.array([px, 0.0])
                ub = worst_case_cvar_ub(amb, BETA, x, obs, sup).value
                lb = worst_case_cvar_lb_oracle(amb, BETA, x, obs, sup, grid_resolution=1e-3)
                assert lb <= ub + 1e-7
                gaps.append(ub - lb)
    note(f"max 1-D gap {max(gaps):.1e}")
    assert max(gaps) <= 1e-2


# ---- 3 -----------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_set_containments(note):
    rng = np.random.default_rng(303)
    W = truncated(rng, 40)
    theta = RUN.theta
    amb = AmbiguitySet(DiscreteDistribution.empirical(W), theta)
    offsets = inner_offsets(amb, BETA, OBS, SUPPORT)
    cd = cluster(W, RUN.n_clusters, 0, support=SUPPORT, n_init=RUN.kmeans_restarts)
    cl_amb = inflated_ambiguity(cd, theta)
    hits_inn = hits_cl = 0
    for x in random_states(rng, 200):
        margins = OBS.position(x) @ OBS.body.A.T - OBS.body.b - offsets - OBS.clearance
        if np.max(margins) >= 0:
            hits_inn += 1
            assert worst_case_cvar_ub(amb, BETA, x, OBS, SUPPORT).value <= 1e-6
        if member_x_wass(x, cl_amb, BETA, OBS, SUPPORT):
            hits_cl += 1
            assert member_x_wass(x, amb, BETA, OBS, SUPPORT)
    note(f"{hits_inn} inner members, {hits_cl} clustered members of 200")
    assert hits_inn > 20 and hits_cl > 20


# ---- 4-7: full experiment ------------------------------------------------------

@pytest.fixture(scope="session")
def experiment():
    results, elapsed = {}, {}
    for variant in VARIANTS:
        t0 = time.perf_counter()
        results[variant] = run_iterations(PROBLEM, variant, RUN.seed, iterations=20)
        elapsed[variant] = time.perf_counter() - t0
    return results, elapsed


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_experiment_reaches_target_safely(experiment, note):
    results, elapsed = experiment
    for variant, res in results.items():
        assert len(res.records) == 20
        for rec in res.records:
            tr = rec.trajectory
            assert np.linalg.norm(tr.states[-1] - PROBLEM.mpc.target) <= 1e-2
            assert tr.steps <= 200
            assert rec.certified
    total = sum(elapsed.values())
    note(f"total {total / 60:.1f} min, " + ", ".join(f"{v} {t:.0f} s" for v, t in elapsed.items()))
    assert total <= 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_step_time_ordering(experiment, note):
    results, _ = experiment
    inn, cl, wass = (np.array([r.mean_step_time for r in results[v].records]) for v in VARIANTS)
    j = np.arange(1, 21) >= 5
    note(f"j>=5 mean step: inn {inn[j].mean():.2f} s, cl {cl[j].mean():.2f} s, wass {wass[j].mean():.2f} s")
    assert np.all(inn[j] <= cl[j])
    assert np.all(cl[j] < wass[j])


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_cost_trend(experiment, note):
    results, _ = experiment
    inner = results[INN_WASS].records
    note(f"inner cost {inner[0].cost:.3f} -> {inner[-1].cost:.3f}")
    assert inner[-1].cost <= inner[0].cost
    for variant, res in results.items():
        for rec in res.records[1:]:
            assert rec.cost <= res.robust.cost


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_safe_set_mechanics_on_experiment(experiment):
    results, _ = experiment
    for res in results.values():
        ss = res.safe_set
        once = prune(ss, lambda x: True)
        assert once.to_json() == ss.to_json()
        for rec in res.records:
            tr = rec.trajectory
            direct = [
                sum(PROBLEM.mpc.stage_cost(tr.states[k], tr.inputs[k]) for k in range(t, tr.steps))
                for t in range(tr.steps + 1)
            ]
            np.testing.assert_allclose(
                cost_to_go(tr.states, tr.inputs, PROBLEM.mpc.Q, PROBLEM.mpc.R, PROBLEM.mpc.target),
                direct, rtol=0, atol=1e-9,
            )


@pytest.mark.criterion(7)
def test_prune_idempotence_and_qmap_minimum():
    s = np.array([1.0, 1.0, 0.0, 0.0])
    target = PROBLEM.mpc.target
    ss = append_trajectory(SampledSafeSet(), 0, np.array([[0, 0, 0, 0], s, target]), [9.0, 7.0, 0.0], first_t=0)
    ss = append_trajectory(ss, 1, np.array([[0, 1, 0, 0], s, target]), [6.0, 4.0, 0.0], first_t=0)
    assert min_cost_map(ss)[s] == 4.0
    ss = append_trajectory(ss, 2, np.array([[3, 3, 0, 0], target]), [2.0, 0.0], first_t=0)

    def is_safe(x):
        return not np.allclose(x, [3, 3, 0, 0])

    once = prune(ss, is_safe)
    assert once.active == (0, 1) and once.pruned == (2,)
    assert prune(once, is_safe).to_json() == once.to_json()


# ---- 8 -----------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_solver_unit_suite():
    assert conic.solve(soc_norm_program()).objective == pytest.approx(5.0, abs=1e-7)
    prog = infeasible_program()
    sol = conic.solve(prog)
    assert sol.status == conic.INFEASIBLE
    assert prog.b @ sol.certificate > 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(3, 3))
        Q = M @ M.T + 0.1 * np.eye(3)
        q = 2 * rng.normal(size=3)
        prog, _ = qp_program(Q, q, -np.ones(3), np.ones(3))
        _, f_grid = dense_grid_minimizer(Q, q, -np.ones(3), np.ones(3))
        assert conic.solve(prog).objective == pytest.approx(f_grid, abs=1e-4)


# ---- 9 -----------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(9)
def test_outputs_are_byte_identical(tmp_path, note):
    cfg = tmp_path / "config.json"
    cfg.write_text('{"iterations": 1, "timing": "off"}')
    # Identical invocations; the first run's outputs are moved aside before the second.
    out = tmp_path / "out"
    outs = [tmp_path / "first", out]
    for _ in range(2):
        if out.exists():
            out.rename(outs[0])
        assert main(["plan", "--config", str(cfg), "--variant", "all", "--seed", "7", "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == ["cost.svg", "metrics.json", "timing.svg", "trajectories.csv", "trajectories.svg"]
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    note(f"{len(names)} files compared")
