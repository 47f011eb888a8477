"""Command-line interface.

Subcommands: run, sweep, gradcheck, oracle, evaluate. Exit codes: 0 ok,
2 config error, 3 numerical abort (gradcheck failures use 1). Output
locations resolve as --out, then the config's output_dir, then
$FLOWTUNE_OUTPUT_ROOT (default ./runs) plus a deterministic name, so
reruns land in the same place.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, FlowtuneError, NumericalAbortError, UnsupportedOracleError
from .gradcheck import DEFAULT_THRESHOLD, run_gradcheck
from .likelihood import prepare_workspace
from .objectives import RolloutGroup, compute_advantages
from .oracles import (diag_gaussian_grid, grid_tilt, proximal_recursion, reward_batch,
                      tilted_gaussian_oracle, tv_grid)
from .rngs import stream
from .samplers import SamplerConfig, sample_group
from .training import (METRICS_HEADER, MetricsRow, build_oracle_grids, evaluate, init_state,
                       load_checkpoint, run_experiment)

SWEEP_AXES = {
    "objective": ("objective", "kind"),
    "estimator-weighting": ("estimator", "weighting"),
    "mc-scheme": ("estimator", "mc_scheme"),
    "ratio-mode": ("estimator", "ratio_mode"),
    "sampler-mode": ("sampler", "mode"),
}


def _output_root() -> Path:
    return Path(os.environ.get("FLOWTUNE_OUTPUT_ROOT", "runs"))


def _resolve_out(args_out: str | None, cfg: ExperimentConfig, default_name: str) -> Path:
    if args_out:
        return Path(args_out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return _output_root() / default_name


def _load_config(path: str) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(path)
    cfg.validate()
    return cfg


def _dump_first_workspace(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Serialize the epoch-1, prompt-0 likelihood workspace for inspection."""
    state = init_state(cfg)
    cond = int(stream(cfg.seed, "prompts", 1).integers(cfg.n_conditions, size=1)[0])
    record_traj = cfg.estimator.formula == "trajectory"
    sampler_cfg = cfg.sampler
    if record_traj:
        sampler_cfg = SamplerConfig(mode=cfg.sampler.mode, n_steps=cfg.sampler.n_steps,
                                    noise_level=cfg.sampler.noise_level,
                                    record_trajectory=True,
                                    start_clamp=cfg.sampler.start_clamp)
    member_rngs = [stream(cfg.seed, "rollout", 1, 0, g) for g in range(cfg.train.group_size)]
    rollout = sample_group(state.field_old, sampler_cfg, cond, member_rngs)
    subjects = rollout.trajectories if record_traj else list(rollout.terminal)
    est_rngs = [stream(cfg.seed, "estimator", 1, 0, g) for g in range(cfg.train.group_size)]
    ws = prepare_workspace(subjects, np.full(cfg.train.group_size, cond), state.field_old,
                           state.field_ref, cfg.estimator, n_grid=cfg.sampler.n_steps,
                           member_rngs=est_rngs)
    rewards = reward_batch(cfg.reward, rollout.terminal, cond)
    group = RolloutGroup(condition=cond, samples=rollout.terminal, rewards=rewards)
    compute_advantages(group, cfg.objective)
    record = ws.to_record()
    record["rewards"] = group.rewards.tolist()
    record["advantages"] = group.advantages.tolist()
    (out_dir / "workspace.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    out_dir = _resolve_out(args.out, cfg, f"run-seed{cfg.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.dump_workspace:
        _dump_first_workspace(cfg, out_dir)
    summary = run_experiment(cfg, out_dir)
    final = summary["final"]
    print(f"run complete: {out_dir}")
    print(f"  epochs={final['epoch']} mean_reward={final['mean_reward']:.4f} "
          f"kl_to_ref={final['kl_to_ref']:.4f} tv_to_oracle={final['tv_to_oracle']:.4f} "
          f"nfe={final['nfe_cumulative']}")
    return 0


def _parse_axes(axis_args: list[str]) -> dict[str, list[str]]:
    axes: dict[str, list[str]] = {}
    for raw in axis_args:
        if "=" not in raw:
            raise ConfigError(f"axis must look like name=v1,v2 (got {raw!r})", field="axis")
        name, _, values = raw.partition("=")
        name = name.strip()
        if name not in SWEEP_AXES:
            raise ConfigError(
                f"unknown sweep axis {name!r}; valid: {', '.join(sorted(SWEEP_AXES))}",
                field="axis")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"axis {name!r} has no values", field="axis")
        axes[name] = vals
    if not axes:
        raise ConfigError("sweep needs at least one --axis", field="axis")
    return axes


def cmd_sweep(args) -> int:
    base = ExperimentConfig.from_json(args.config)
    axes = _parse_axes(args.axis or [])
    out_dir = _resolve_out(args.out, base, f"sweep-seed{base.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(axes)
    ran, skipped = [], []
    for combo in itertools.product(*(axes[n] for n in names)):
        cell = dict(zip(names, combo))
        cell_key = "__".join(f"{n}={cell[n]}" for n in names)
        data = base.to_dict()
        data["output_dir"] = None
        for axis_name, value in cell.items():
            section, field_name = SWEEP_AXES[axis_name]
            data[section][field_name] = value
        try:
            cfg = ExperimentConfig.from_dict(data)
            cfg.validate()
        except ConfigError as err:
            reason = str(err)
            skipped.append({"cell": cell_key, "reason": reason})
            print(f"skip {cell_key}: {reason}")
            continue
        cell_dir = out_dir / cell_key
        summary = run_experiment(cfg, cell_dir)
        row = dict(cell)
        row.update(summary["final"])
        ran.append(row)
        print(f"done {cell_key}: mean_reward={summary['final']['mean_reward']:.4f}")
    if ran:
        cols = names + ["epoch", "mean_reward", "kl_to_ref", "tv_to_oracle",
                        "nfe_cumulative", "ratio_warnings", "skipped_groups"]
        lines = [",".join(cols)]
        for row in ran:
            lines.append(",".join(str(row[c]) for c in cols))
        (out_dir / "comparison.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "sweep_summary.json").write_text(json.dumps({
        "cells_run": len(ran),
        "cells_skipped": len(skipped),
        "skipped": skipped,
        "axes": axes,
    }, indent=2, sort_keys=True) + "\n")
    print(f"sweep complete: {len(ran)} cells run, {len(skipped)} skipped -> {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, threshold=args.threshold)
    for line in report.format_lines():
        print(line)
    return 0 if report.passed else 1


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    out_dir = _resolve_out(args.out, cfg, f"oracle-seed{cfg.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    ref_means, ref_vars = cfg.ref_means_array(), cfg.ref_vars_array()
    beta = cfg.reward.beta
    summary: dict = {"beta": beta, "conditions": []}
    for c in range(cfg.n_conditions):
        ref_grid = diag_gaussian_grid(ref_means[c], ref_vars[c], bins=cfg.oracle_bins)
        rewards = reward_batch(cfg.reward, ref_grid.centers(), c)
        target = grid_tilt(ref_grid, rewards, beta)
        target.validate()
        target.to_csv(out_dir / f"oracle_grid_c{c}.csv")
        tv_lines = ["k,tv_to_target"]
        pi = ref_grid.copy()
        for k in range(1, args.iterations + 1):
            pi = proximal_recursion(ref_grid, target, pi, cfg.objective.eta)
            tv_lines.append(f"{k},{tv_grid(pi, target):.17g}")
        (out_dir / f"proximal_c{c}.csv").write_text("\n".join(tv_lines) + "\n")
        entry: dict = {"condition": c, "grid_mass": float(target.masses.sum())}
        try:
            means, variances = tilted_gaussian_oracle(ref_means[c], ref_vars[c],
                                                      cfg.reward, c, beta=beta)
            entry["closed_form"] = {"means": means.tolist(), "variances": variances.tolist()}
        except UnsupportedOracleError as err:
            entry["closed_form"] = None
            entry["note"] = str(err)
        summary["conditions"].append(entry)
    (out_dir / "oracle_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"oracle artifacts written to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    run_dir = Path(args.run)
    if not (run_dir / "checkpoint.npz").exists():
        raise ConfigError(f"no checkpoint found in {run_dir}", field="run")
    state = load_checkpoint(cfg, run_dir)
    oracle_grids = build_oracle_grids(cfg)
    mean_reward, kl_to_ref, tv_to_oracle = evaluate(state, cfg, oracle_grids,
                                                    epoch=state.epoch)
    row = MetricsRow(epoch=state.epoch, mean_reward=mean_reward, kl_to_ref=kl_to_ref,
                     tv_to_oracle=tv_to_oracle, nfe_cumulative=state.nfe_cumulative,
                     ratio_warnings=state.diagnostics.warnings, wall_ms=0.0)
    print(METRICS_HEADER)
    print(row.to_csv_line())
    (run_dir / "eval.json").write_text(json.dumps({
        "epoch": state.epoch, "mean_reward": mean_reward, "kl_to_ref": kl_to_ref,
        "tv_to_oracle": tv_to_oracle, "nfe_cumulative": state.nfe_cumulative,
    }, indent=2, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtune",
        description="Desk-scale lab for RL fine-tuning of flow models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--dump-workspace", action="store_true",
                       help="serialize the first epoch's first likelihood workspace")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="Cartesian product over design-space axes")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", action="append", default=[],
                         metavar="NAME=V1,V2",
                         help=f"axis values; valid names: {', '.join(sorted(SWEEP_AXES))}")
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_oracle = sub.add_parser("oracle", help="write ground-truth oracle artifacts")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--out", default=None)
    p_oracle.add_argument("--iterations", type=int, default=25,
                          help="proximal-recursion iterates to record")
    p_oracle.set_defaults(fn=cmd_oracle)

    p_eval = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--run", required=True, help="run directory with checkpoint.npz")
    p_eval.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericalAbortError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        if err.diagnostics:
            print(json.dumps(err.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return 3
    except FlowtuneError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
