import json

import pytest

from drmpc.config import RunConfig, config_from_dict, dump_config, parse_config
from drmpc.errors import ConfigurationError


def test_empty_object_gives_table_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = parse_config(path)
    assert cfg.beta == 0.05
    assert cfg.d_min == 0.1
    assert cfg.obstacle_side == 1.0
    assert cfg.agent_radius == 0.2
    assert cfg.horizon == 11
    assert cfg.theta == 1e-3
    assert cfg.iterations == 20
    assert cfg.n_clusters == 5
    assert cfg.x_start == (0.0, 0.0, 0.0, 0.0)
    assert cfg.x_target == (5.0, 3.0, 0.0, 0.0)
    assert cfg.obstacle_center == (2.0, 1.2)
    assert cfg.sigma == 0.15
    assert cfg.support_half_width == 0.45
    assert cfg.initial_samples == 15
    assert cfg.Q_diag == (1.0, 1.0, 0.01, 0.01)
    assert cfg.R_diag == (0.01, 0.01)
    assert cfg.A[0] == (1.0, 0.0, 1.0, 0.0)
    assert cfg.clearance == pytest.approx(0.3)


def test_out_of_range_beta_names_the_field():
    with pytest.raises(ConfigurationError, match="beta"):
        config_from_dict({"beta": 1.5})


def test_round_trip_is_identical():
    cfg = config_from_dict({"horizon": 11, "theta": [1e-3] * 20})
    text = dump_config(cfg)
    again = config_from_dict(json.loads(text))
    assert again == cfg
    assert dump_config(again) == text


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="horizn"):
        config_from_dict({"horizn": 11})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        parse_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        parse_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        parse_config(arr)


@pytest.mark.parametrize(
    "override",
    [
        {"theta": -1.0},
        {"theta": [1e-3] * 3},
        {"R_diag": [0.0, 0.01]},
        {"input_lower": [0.1, -0.1]},
        {"state_lower": [8, -1.5, -1, -1]},
        {"horizon": 0},
        {"variant": "exact"},
    ],
)
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigurationError):
        config_from_dict(override)


def test_theta_schedule():
    cfg = config_from_dict({"iterations": 3, "theta": [0.3, 0.2, 0.1]})
    assert [cfg.theta_at(j) for j in range(5)] == [0.3, 0.2, 0.1, 0.1, 0.1]
    assert RunConfig().theta_at(7) == 1e-3
