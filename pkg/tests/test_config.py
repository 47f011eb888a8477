"""Config schema: strict keys, defaults, round-trips, validation paths."""

import numpy as np
import pytest

from flowtune.config import ExperimentConfig
from flowtune.errors import ConfigError


def test_minimal_config_is_just_a_seed():
    cfg = ExperimentConfig.from_dict({"seed": 0})
    cfg.validate()
    assert cfg.data_dim == 1
    assert cfg.n_conditions == 1
    assert cfg.train.epochs == 50
    assert cfg.sampler.mode == "ode-heun2"
    assert cfg.estimator.formula == "elbo"
    assert cfg.objective.kind == "epg"
    assert cfg.reward.kind == "quadratic"


def test_missing_seed_is_named():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({})
    assert exc.value.field == "seed"


def test_unknown_keys_carry_their_dotted_path():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "trainx": {}})
    assert exc.value.field == "trainx"
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "train": {"lr": 0.1}})
    assert exc.value.field == "train.lr"
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "estimator": {"scheme": "x"}})
    assert exc.value.field == "estimator.scheme"


def test_parse_serialize_parse_is_an_identity():
    data = {
        "seed": 7, "data_dim": 2, "n_conditions": 3,
        "ref_means": [[0.0, 1.0], [1.0, 0.0], [-1.0, -1.0]],
        "ref_vars": [1.0, 2.0], "oracle_bins": 40,
        "model": {"hidden": [16, 8], "embed_dim": 3},
        "sampler": {"mode": "sde-euler", "n_steps": 12, "noise_level": 0.5},
        "estimator": {"formula": "trajectory", "ratio_mode": "sum-of-exp"},
        "objective": {"kind": "par", "beta": 0.5, "eta": 2.0},
        "train": {"epochs": 9, "group_size": 4},
        "reward": {"kind": "ring", "radius": 1.5},
    }
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    once = cfg.to_dict()
    again = ExperimentConfig.from_dict(once).to_dict()
    assert once == again
    assert once["sampler"]["n_steps"] == 12
    assert once["objective"]["eta"] == 2.0


def test_json_file_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seed": 5, "train": {"epochs": 3}})
    path = tmp_path / "cfg.json"
    cfg.to_json(path)
    back = ExperimentConfig.from_json(path)
    assert back.to_dict() == cfg.to_dict()


def test_from_json_failure_modes(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_json(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.from_json(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="root must be"):
        ExperimentConfig.from_json(arr)


def test_reference_moment_expansion():
    cfg = ExperimentConfig.from_dict({"seed": 0, "data_dim": 2, "n_conditions": 3,
                                      "ref_means": 0.5, "ref_vars": [1.0, 2.0]})
    np.testing.assert_array_equal(cfg.ref_means_array(), np.full((3, 2), 0.5))
    np.testing.assert_array_equal(cfg.ref_vars_array(), np.tile([1.0, 2.0], (3, 1)))
    table = ExperimentConfig.from_dict({"seed": 0, "n_conditions": 2,
                                        "ref_means": [[1.0], [2.0]]})
    np.testing.assert_array_equal(table.ref_means_array(), [[1.0], [2.0]])


def test_reference_moment_rejections():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "data_dim": 2,
                                    "ref_means": [0.0, 0.0, 0.0]}).validate()
    assert exc.value.field == "ref_means"
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "ref_vars": -1.0}).validate()
    assert exc.value.field == "ref_vars"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 0, "n_conditions": 2,
                                    "ref_means": [[1.0], [2.0], [3.0]]}).validate()


@pytest.mark.parametrize("patch,field", [
    ({"seed": "three"}, "seed"),
    ({"data_dim": 3}, "data_dim"),
    ({"n_conditions": 0}, "n_conditions"),
    ({"oracle_bins": 5}, "oracle_bins"),
    ({"model": {"hidden": []}}, "model.hidden"),
    ({"model": {"embed_dim": 0}}, "model.embed_dim"),
    ({"sampler": {"mode": "rk4"}}, "sampler"),
    ({"sampler": {"n_steps": 1}}, "sampler"),
    ({"estimator": {"ratio_mode": "sum-of-exp"}}, "estimator"),
    ({"objective": {"kind": "ppo"}}, "objective.kind"),
    ({"train": {"group_size": 1}}, "train.group_size"),
    ({"reward": {"kind": "cosine"}}, "reward.kind"),
])
def test_validation_errors_name_their_field(patch, field):
    data = {"seed": 0, **patch}
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(data).validate()
    assert exc.value.field == field
    assert str(exc.value).startswith(field)


def test_reward_dimension_checks():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({"seed": 0, "data_dim": 2,
                                    "reward": {"means": [[0.0]]}}).validate()
    assert exc.value.field == "reward.means"
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({
            "seed": 0, "n_conditions": 3,
            "reward": {"means": [[0.0], [1.0]]}}).validate()
    assert exc.value.field == "reward.means"
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict({
            "seed": 0, "data_dim": 2,
            "reward": {"kind": "indicator-region", "region_low": [0.0],
                       "region_high": [1.0]}}).validate()
    assert exc.value.field == "reward.region_low"


def test_trajectory_formula_requires_stochastic_sampling():
    data = {"seed": 0,
            "estimator": {"formula": "trajectory", "ratio_mode": "exp-of-sum"},
            "sampler": {"mode": "ode-heun2", "n_steps": 4}}
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(data).validate()
    assert exc.value.field == "estimator.formula"
    assert "stochastic" in str(exc.value)
    ok = {**data, "sampler": {"mode": "sde-euler", "n_steps": 4, "noise_level": 0.7}}
    ExperimentConfig.from_dict(ok).validate()
