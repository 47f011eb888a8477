"""CLI contract: subcommands, artifacts, exit codes, output resolution."""

import json
import subprocess

import numpy as np
import pytest

from flowtune import autodiff as ad
from flowtune.cli import SWEEP_AXES, main
from flowtune.training import METRICS_HEADER


def _write_config(tmp_path, name="cfg.json", **overrides):
    base = {
        "seed": 11, "data_dim": 1, "n_conditions": 1, "ref_means": 0.0, "ref_vars": 1.0,
        "oracle_bins": 40, "model": {"hidden": [6], "embed_dim": 2},
        "sampler": {"mode": "ode-euler", "n_steps": 2},
        "estimator": {"formula": "elbo", "weighting": "adaptive",
                      "mc_scheme": "single-timestep", "ratio_mode": "exp-of-sum"},
        "objective": {"kind": "epg", "beta": 1.0, "eta": 1.0},
        "train": {"epochs": 2, "prompts_per_epoch": 2, "group_size": 2,
                  "grad_steps_per_epoch": 1, "learning_rate": 0.001,
                  "ema_decay_type": 1, "eval_samples": 50},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base[key] = {**base.get(key, {}), **value}
        else:
            base[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return path


def test_run_writes_all_artifacts(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "run-out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert "run complete" in capsys.readouterr().out
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 3  # header + one row per epoch
    for name in ("summary.json", "checkpoint.npz", "checkpoint_manifest.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final"]["epoch"] == 2
    assert summary["final"]["nfe_cumulative"] == 2 * 2 * 2 * 2  # E*P*G*steps, 1 stage


def test_run_can_dump_the_first_workspace(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "dump-out"
    assert main(["run", "--config", str(cfg), "--out", str(out),
                 "--dump-workspace"]) == 0
    record = json.loads((out / "workspace.json").read_text())
    assert "rewards" in record and "advantages" in record
    assert len(record["rewards"]) == 2


def test_default_output_root_comes_from_the_environment(tmp_path, monkeypatch, capsys):
    root = tmp_path / "custom-root"
    monkeypatch.setenv("FLOWTUNE_OUTPUT_ROOT", str(root))
    cfg = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    assert (root / "run-seed11" / "metrics.csv").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", "--config", str(missing)]) == 2
    assert "config error" in capsys.readouterr().err

    bad_key = tmp_path / "bad.json"
    bad_key.write_text(json.dumps({"seed": 0, "train": {"lr": 1}}))
    assert main(["run", "--config", str(bad_key)]) == 2
    assert "train.lr" in capsys.readouterr().err

    ode_traj = _write_config(
        tmp_path, name="odetraj.json",
        estimator={"formula": "trajectory", "ratio_mode": "exp-of-sum"})
    assert main(["run", "--config", str(ode_traj)]) == 2
    assert "estimator.formula" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exits_3(tmp_path, capsys):
    cfg = _write_config(tmp_path, train={"learning_rate": 1e200, "epochs": 3})
    out = tmp_path / "boom"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
    assert "numerical abort" in capsys.readouterr().err
    assert (out / "abort.json").exists()


def test_gradcheck_passes_and_prints_per_cell_lines(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck: PASS" in out
    assert "[ok  ] op" in out
    assert "[FAIL]" not in out


def test_gradcheck_flags_a_corrupted_backward_rule(monkeypatch, capsys):
    import flowtune.autodiff

    def bad_tanh(a):
        out = ad.Tensor(np.tanh(a.values))
        return ad._record("tanh", out, (a,), lambda g: (g * 0.5,))  # wrong rule

    monkeypatch.setattr(flowtune.autodiff, "tanh", bad_tanh)
    assert main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] op tanh" in out
    assert "gradcheck: FAIL" in out


def test_oracle_artifacts_and_closed_form(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "oracle-out"
    assert main(["oracle", "--config", str(cfg), "--out", str(out),
                 "--iterations", "30"]) == 0
    summary = json.loads((out / "oracle_summary.json").read_text())
    closed = summary["conditions"][0]["closed_form"]
    np.testing.assert_allclose(closed["means"], [0.0], atol=1e-15)
    np.testing.assert_allclose(closed["variances"], [0.5], atol=1e-15)
    assert summary["conditions"][0]["grid_mass"] == pytest.approx(1.0, abs=1e-12)

    grid_lines = (out / "oracle_grid_c0.csv").read_text().strip().split("\n")
    assert grid_lines[0] == "x0,mass"
    assert len(grid_lines) == 1 + 40

    prox_lines = (out / "proximal_c0.csv").read_text().strip().split("\n")
    assert prox_lines[0] == "k,tv_to_target"
    tvs = [float(l.split(",")[1]) for l in prox_lines[1:]]
    assert len(tvs) == 30
    assert all(b <= a for a, b in zip(tvs, tvs[1:]))
    assert tvs[-1] < 1e-6


def test_oracle_notes_rewards_without_closed_forms(tmp_path):
    cfg = _write_config(tmp_path, reward={"kind": "ring", "radius": 1.0}, data_dim=2,
                        oracle_bins=20)
    out = tmp_path / "oracle-ring"
    assert main(["oracle", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "oracle_summary.json").read_text())
    assert summary["conditions"][0]["closed_form"] is None
    assert "note" in summary["conditions"][0]


def test_evaluate_roundtrip_after_run(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "eval-run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg), "--run", str(out)]) == 0
    printed = capsys.readouterr().out.strip().split("\n")
    assert printed[0] == METRICS_HEADER
    assert printed[1].startswith("2,")  # checkpoint epoch
    report = json.loads((out / "eval.json").read_text())
    assert report["epoch"] == 2
    assert report["nfe_cumulative"] == 16


def test_evaluate_without_checkpoint_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    empty = tmp_path / "empty-run"
    empty.mkdir()
    assert main(["evaluate", "--config", str(cfg), "--run", str(empty)]) == 2
    assert "no checkpoint" in capsys.readouterr().err


def test_sweep_runs_cells_and_skips_invalid_combinations(tmp_path, capsys):
    cfg = _write_config(tmp_path, train={"epochs": 1, "eval_samples": 30})
    out = tmp_path / "sweep-out"
    code = main(["sweep", "--config", str(cfg), "--out", str(out),
                 "--axis", "objective=epg,grpo",
                 "--axis", "ratio-mode=exp-of-sum,sum-of-exp"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "skip" in printed

    summary = json.loads((out / "sweep_summary.json").read_text())
    # sum-of-exp needs the trajectory formula: both of its cells skip
    assert summary["cells_run"] == 2
    assert summary["cells_skipped"] == 2
    skipped_cells = {s["cell"] for s in summary["skipped"]}
    assert skipped_cells == {"objective=epg__ratio-mode=sum-of-exp",
                             "objective=grpo__ratio-mode=sum-of-exp"}
    for cell in ("objective=epg__ratio-mode=exp-of-sum",
                 "objective=grpo__ratio-mode=exp-of-sum"):
        assert (out / cell / "metrics.csv").exists()

    comparison = (out / "comparison.csv").read_text().strip().split("\n")
    assert comparison[0].startswith("objective,ratio-mode,epoch,mean_reward")
    assert len(comparison) == 3


def test_sweep_axis_parsing_errors(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--axis", "gamma=1,2"]) == 2
    assert "unknown sweep axis" in capsys.readouterr().err
    assert main(["sweep", "--config", str(cfg), "--axis", "objective"]) == 2
    assert main(["sweep", "--config", str(cfg)]) == 2
    assert sorted(SWEEP_AXES) == ["estimator-weighting", "mc-scheme", "objective",
                                  "ratio-mode", "sampler-mode"]


def test_console_script_is_installed(tmp_path):
    proc = subprocess.run(["flowtune", "run", "--config", str(tmp_path / "absent.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "config error" in proc.stderr
