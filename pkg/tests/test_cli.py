import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from drmpc.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVE, _checkpoint_for, main
from drmpc.config import RunConfig
from drmpc.errors import InputError
from drmpc.experiment import ExperimentResult, IterationRecord, Trajectory, build_problem
from drmpc.report import emit_outputs, read_trajectories
from drmpc.safeset import cost_to_go

SVGS = ("trajectories.svg", "timing.svg", "cost.svg")


def write_config(tmp_path, **fields):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(fields))
    return path


def synthetic_result(steps=5, iteration=1):
    problem = build_problem(RunConfig())
    target = problem.mpc.target
    states = np.linspace(problem.mpc.start, target, steps + 1)
    inputs = np.full((steps, 2), 0.01)
    costs = cost_to_go(states, inputs, problem.mpc.Q, problem.mpc.R, target)
    traj = Trajectory(states, inputs, costs)
    rec = IterationRecord(iteration, traj, np.full(steps, 0.5), steps, 15 + steps, 0.1, (), 0, 0, True)
    return problem, ExperimentResult("inn_wass", 0, traj, [rec])


def test_five_steps_give_six_rows(tmp_path):
    problem, res = synthetic_result(5)
    emit_outputs({"inn": res}, tmp_path, problem)
    with open(tmp_path / "trajectories.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["t"]) for r in rows] == list(range(6))
    assert rows[-1]["u1"] == "" and rows[-1]["step_time_s"] == ""
    assert float(rows[0]["step_time_s"]) == 0.5


def test_empty_records_rejected(tmp_path):
    problem, res = synthetic_result()
    res.records.clear()
    with pytest.raises(InputError):
        emit_outputs({"inn": res}, tmp_path, problem)


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, iterations=2, timing="off")
    out = tmp / "out"
    code = main(["plan", "--config", str(cfg), "--variant", "inn", "--seed", "3", "--out", str(out)])
    return code, out


def test_cli_success_writes_all_outputs(cli_run):
    code, out = cli_run
    assert code == EXIT_OK
    for name in ("trajectories.csv", "metrics.json", *SVGS):
        assert (out / name).is_file()


def test_csv_row_count_matches_steps(cli_run):
    _, out = cli_run
    doc = json.loads((out / "metrics.json").read_text())
    its = doc["variants"]["inn"]["iterations"]
    with open(out / "trajectories.csv", newline="") as fh:
        n_rows = sum(1 for _ in csv.DictReader(fh))
    assert n_rows == sum(it["steps"] + 1 for it in its)
    assert doc["config"]["seed"] == 3


def test_metrics_cost_matches_csv_recomputation(cli_run):
    _, out = cli_run
    cfg = RunConfig()
    Q, R, target = np.diag(cfg.Q_diag), np.diag(cfg.R_diag), np.array(cfg.x_target)
    doc = json.loads((out / "metrics.json").read_text())
    trajs = read_trajectories(out / "trajectories.csv")
    for it in doc["variants"]["inn"]["iterations"]:
        states, inputs = trajs[("inn", it["iteration"])]
        dx = states[:-1] - target
        direct = np.einsum("ti,ij,tj->", dx, Q, dx) + np.einsum("ti,ij,tj->", inputs, R, inputs)
        assert it["cost"] == pytest.approx(direct, abs=1e-9)


def test_svgs_are_well_formed(cli_run):
    _, out = cli_run
    for name in SVGS:
        root = ET.parse(out / name).getroot()
        assert root.tag.endswith("svg")


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["plan", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_schema_error_exits_2_and_names_field(tmp_path, capsys):
    assert main(["plan", "--config", str(write_config(tmp_path, beta=1.5))]) == EXIT_CONFIG
    assert "beta" in capsys.readouterr().err


def test_bad_log_level_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("DRMPC_LOG", "verbose")
    assert main(["plan", "--config", str(write_config(tmp_path))]) == EXIT_CONFIG


def test_nonconvergence_exits_4(tmp_path):
    cfg = write_config(tmp_path, iterations=1, step_cap=2, timing="off")
    assert main(["plan", "--config", str(cfg), "--variant", "inn", "--out", str(tmp_path / "o")]) == EXIT_SOLVE


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    cfg = write_config(tmp_path, iterations=1, timing="off")
    assert main(["plan", "--config", str(cfg), "--variant", "inn", "--out", str(blocker / "out")]) == EXIT_IO


def test_checkpoint_names_per_variant(tmp_path):
    base = tmp_path / "ck.json"
    assert _checkpoint_for(base, "inn", 1) == base
    assert _checkpoint_for(base, "cl-wass", 3) == tmp_path / "ck.cl-wass.json"
