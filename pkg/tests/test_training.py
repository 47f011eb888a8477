"""Training loop accounting: EMA, NFE, determinism, metrics artifacts."""

import numpy as np
import pytest

from flowtune.config import ExperimentConfig
from flowtune.errors import ConfigError, ContractViolation, NumericalAbortError
from flowtune.training import (METRICS_HEADER, MetricsRow, TrainConfig, _minibatch_slices,
                               build_oracle_grids, ema_decay, evaluate, init_state,
                               load_checkpoint, nfe_to_reach, read_metrics, run_epoch,
                               run_experiment)


def _cfg(**overrides):
    base = {
        "seed": 3, "data_dim": 1, "n_conditions": 1, "ref_means": 0.0, "ref_vars": 1.0,
        "oracle_bins": 60, "model": {"hidden": [8], "embed_dim": 2},
        "sampler": {"mode": "ode-euler", "n_steps": 3},
        "estimator": {"formula": "elbo", "weighting": "adaptive",
                      "mc_scheme": "single-timestep", "ratio_mode": "exp-of-sum"},
        "objective": {"kind": "epg", "beta": 1.0},
        "train": {"epochs": 2, "prompts_per_epoch": 4, "group_size": 4,
                  "grad_steps_per_epoch": 2, "learning_rate": 0.001,
                  "ema_decay_type": 1, "eval_samples": 200},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base[key] = {**base.get(key, {}), **value}
        else:
            base[key] = value
    cfg = ExperimentConfig.from_dict(base)
    cfg.validate()
    return cfg


def _params(fld):
    return {name: p.values.copy() for name, p in fld.named_parameters()}


def test_ema_decay_exact_values():
    assert ema_decay(1, 1) == 0.001
    assert ema_decay(100, 1) == 0.1
    assert ema_decay(500, 1) == 0.5
    assert ema_decay(1000, 1) == 0.5
    assert ema_decay(50, 2) == 0.5
    assert ema_decay(80, 2) == 0.8
    assert ema_decay(200, 2) == 0.8
    with pytest.raises(ContractViolation):
        ema_decay(0, 1)
    with pytest.raises(ConfigError):
        ema_decay(10, 3)


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError):
        TrainConfig(grad_steps_per_epoch=9, prompts_per_epoch=8).validate()
    with pytest.raises(ConfigError):
        TrainConfig(group_size=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-0.1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(ema_decay_type=5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()


def test_minibatch_slices_cover_everything_in_order():
    assert _minibatch_slices(8, 3) == [slice(0, 2), slice(2, 4), slice(4, 8)]
    assert _minibatch_slices(4, 2) == [slice(0, 2), slice(2, 4)]
    assert _minibatch_slices(5, 5) == [slice(i, i + 1) for i in range(5)]


def test_initial_policy_equals_the_reference_exactly():
    cfg = _cfg()
    state = init_state(cfg)
    x = np.linspace(-2.0, 2.0, 7)[:, None]
    ts = np.full(7, 0.6)
    conds = np.zeros(7, dtype=int)
    np.testing.assert_array_equal(state.field.velocity(x, ts, conds),
                                  state.field_ref.velocity(x, ts, conds))
    for (_, a), (_, b) in zip(state.field.named_parameters(),
                              state.field_old.named_parameters()):
        np.testing.assert_array_equal(a.values, b.values)


def test_zero_learning_rate_keeps_the_policy_fixed():
    cfg = _cfg(train={"learning_rate": 0.0, "epochs": 1})
    state = init_state(cfg)
    before = _params(state.field)
    run_epoch(state, cfg)
    for name, p in state.field.named_parameters():
        np.testing.assert_array_equal(p.values, before[name])


def test_epoch_determinism_is_bitwise():
    runs = []
    for _ in range(2):
        cfg = _cfg()
        state = init_state(cfg)
        run_epoch(state, cfg)
        run_epoch(state, cfg)
        runs.append((_params(state.field), state.nfe_cumulative))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][name], runs[1][0][name])


@pytest.mark.parametrize("mode,stages", [("ode-euler", 1), ("ode-heun2", 2), ("sde-euler", 1)])
def test_nfe_counts_training_rollout_evaluations_exactly(mode, stages):
    sampler = {"mode": mode, "n_steps": 3}
    if mode == "sde-euler":
        sampler["noise_level"] = 0.7
    cfg = _cfg(sampler=sampler, train={"epochs": 1})
    state = init_state(cfg)
    run_epoch(state, cfg)
    assert state.nfe_cumulative == 4 * 4 * 3 * stages


def test_evaluate_reports_zero_kl_untrained_and_charges_no_nfe():
    cfg = _cfg()
    state = init_state(cfg)
    grids = build_oracle_grids(cfg)
    mean_reward, kl_to_ref, tv_to_oracle = evaluate(state, cfg, grids, epoch=0)
    assert state.nfe_cumulative == 0
    assert kl_to_ref == 0.0
    assert -0.8 < mean_reward < -0.05  # roughly E[-x^2/2] under the reference
    assert 0.05 < tv_to_oracle < 0.4  # untrained policy vs the tilted oracle


def test_old_policy_follows_the_ema_recursion():
    cfg = _cfg(train={"epochs": 1, "learning_rate": 0.01})
    state = init_state(cfg)
    init_vals = _params(state.field_old)
    run_epoch(state, cfg)
    alpha = ema_decay(1, cfg.train.ema_decay_type)
    for (name, p_new), (_, p_old) in zip(state.field.named_parameters(),
                                         state.field_old.named_parameters()):
        want = (1.0 - alpha) * p_new.values + alpha * init_vals[name]
        np.testing.assert_array_equal(p_old.values, want)


def test_skipped_groups_leave_parameters_untouched():
    # constant-zero rewards (indicator far from all mass) degenerate every
    # grpo group; the loss is exactly zero, so adam must not move anything
    cfg = _cfg(objective={"kind": "grpo", "beta": 1.0},
               reward={"kind": "indicator-region", "region_low": [50.0],
                       "region_high": [51.0]},
               train={"epochs": 1})
    state = init_state(cfg)
    before = _params(state.field)
    run_epoch(state, cfg)
    assert state.skipped_groups == cfg.train.prompts_per_epoch
    for name, p in state.field.named_parameters():
        np.testing.assert_array_equal(p.values, before[name])


def test_trajectory_runs_record_rollouts_even_if_config_does_not():
    cfg = _cfg(sampler={"mode": "sde-euler", "n_steps": 3, "noise_level": 0.7},
               estimator={"formula": "trajectory", "ratio_mode": "sum-of-exp",
                          "weighting": "simple", "mc_scheme": "single-timestep"},
               train={"epochs": 1})
    assert not cfg.sampler.record_trajectory
    state = init_state(cfg)
    run_epoch(state, cfg)
    assert state.nfe_cumulative == 4 * 4 * 3


def test_metrics_row_and_reader_roundtrip(tmp_path):
    assert METRICS_HEADER == ("epoch,mean_reward,kl_to_ref,tv_to_oracle,"
                              "nfe_cumulative,ratio_warnings,wall_ms")
    row = MetricsRow(epoch=3, mean_reward=-0.123456789012345678, kl_to_ref=0.25,
                     tv_to_oracle=0.5, nfe_cumulative=960, ratio_warnings=2, wall_ms=12.3456)
    path = tmp_path / "metrics.csv"
    path.write_text(METRICS_HEADER + "\n" + row.to_csv_line() + "\n")
    back = read_metrics(path)
    assert back == [{"epoch": 3, "mean_reward": -0.12345678901234568, "kl_to_ref": 0.25,
                     "tv_to_oracle": 0.5, "nfe_cumulative": 960, "ratio_warnings": 2,
                     "wall_ms": 12.346}]
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,reward\n1,2\n")
    with pytest.raises(ContractViolation):
        read_metrics(bad)


def test_nfe_to_reach_uses_a_trailing_mean():
    rows = [{"mean_reward": r, "nfe_cumulative": n}
            for r, n in zip([0.0, 0.5, 1.0, 1.0], [10, 20, 30, 40])]
    assert nfe_to_reach(rows, 0.9, trail=1) == 30
    assert nfe_to_reach(rows, 0.8, trail=3) == 40  # means: 0, .25, .5, ~.833
    assert nfe_to_reach(rows, 2.0) is None
    assert nfe_to_reach(rows, -1.0) == 10


def test_run_experiment_artifacts_and_checkpoint_roundtrip(tmp_path):
    cfg = _cfg()
    out = tmp_path / "run"
    summary = run_experiment(cfg, out)
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + cfg.train.epochs
    assert summary["final"]["epoch"] == cfg.train.epochs
    assert summary["final"]["nfe_cumulative"] == 2 * 4 * 4 * 3
    assert summary["final"]["skipped_groups"] == 0
    assert (out / "summary.json").exists()
    assert (out / "checkpoint.npz").exists()
    assert (out / "checkpoint_manifest.json").exists()

    trained = run_epoch(init_state(cfg), cfg)  # fresh single epoch, different params
    restored = load_checkpoint(cfg, out)
    assert restored.epoch == cfg.train.epochs
    assert restored.nfe_cumulative == summary["final"]["nfe_cumulative"]
    del trained


def test_run_experiment_is_deterministic_up_to_wall_time(tmp_path):
    cfg = _cfg()
    lines = []
    for tag in ("a", "b"):
        run_experiment(cfg, tmp_path / tag)
        text = (tmp_path / tag / "metrics.csv").read_text().strip().split("\n")
        lines.append([",".join(l.split(",")[:6]) for l in text])
    assert lines[0] == lines[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_experiment_abort_leaves_a_report(tmp_path):
    cfg = _cfg(train={"learning_rate": 1e200, "epochs": 3})
    out = tmp_path / "boom"
    with pytest.raises(NumericalAbortError):
        run_experiment(cfg, out)
    assert (out / "abort.json").exists()
    assert (out / "metrics.csv").exists()
    assert not (out / "checkpoint.npz").exists()
