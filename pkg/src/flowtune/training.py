"""Outer training loop: rollouts under a frozen old policy, cached
likelihood workspaces, mini-batch gradient steps, and an EMA update of
the old policy at each epoch boundary.

Accounting rules the tests pin down:

* NFE counts velocity-field evaluations spent on training rollouts only
  (evaluation sampling is free); after E epochs it equals
  E * prompts_per_epoch * group_size * n_steps * stage_count exactly.
* The old policy is a snapshot: every rollout and every cached old-side
  evaluation inside one epoch uses the same parameters.
* metrics.csv carries one row per epoch with a frozen header; every
  column except wall_ms is bit-reproducible from (seed, config).
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractViolation, NumericalAbortError
from .flow import AnalyticGaussianField, LearnedField, build_learned_field
from .likelihood import (EstimatorConfig, LikelihoodWorkspace, RatioDiagnostics,
                         policy_terms, prepare_workspace)
from .nets import AdamState, adam_step
from .objectives import ObjectiveConfig, RolloutGroup, compute_advantages, objective_loss
from .oracles import (GridDistribution, RewardSpec, diag_gaussian_grid, grid_tilt,
                      reward_batch, tv_distance)
from .rngs import stream
from .samplers import STAGE_COUNT, SamplerConfig, sample_group

METRICS_HEADER = "epoch,mean_reward,kl_to_ref,tv_to_oracle,nfe_cumulative,ratio_warnings,wall_ms"


@dataclass
class TrainConfig:
    epochs: int = 50
    prompts_per_epoch: int = 8
    group_size: int = 8
    grad_steps_per_epoch: int = 2
    ema_decay_type: int = 1
    learning_rate: float = 1e-3
    eval_samples: int = 2000

    def validate(self) -> None:
        for name in ("epochs", "prompts_per_epoch", "group_size", "grad_steps_per_epoch",
                     "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", field=f"train.{name}")
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2 for group baselines",
                              field="train.group_size")
        if self.ema_decay_type not in (1, 2):
            raise ConfigError("ema_decay_type must be 1 or 2", field="train.ema_decay_type")
        if self.learning_rate < 0.0:
            raise ConfigError("learning_rate must be non-negative", field="train.learning_rate")
        if self.grad_steps_per_epoch > self.prompts_per_epoch:
            raise ConfigError("grad_steps_per_epoch cannot exceed prompts_per_epoch",
                              field="train.grad_steps_per_epoch")


def ema_decay(i: int, decay_type: int) -> float:
    """Old-policy mixing weight at epoch i (1-based)."""
    if i < 1:
        raise ContractViolation(f"epoch index must be >= 1, got {i}")
    if decay_type == 1:
        return min(0.001 * i, 0.5)
    if decay_type == 2:
        return min(0.01 * i, 0.8)
    raise ConfigError(f"unknown EMA decay type {decay_type}", field="train.ema_decay_type")


@dataclass
class MetricsRow:
    epoch: int
    mean_reward: float
    kl_to_ref: float
    tv_to_oracle: float
    nfe_cumulative: int
    ratio_warnings: int
    wall_ms: float

    def to_csv_line(self) -> str:
        return (f"{self.epoch},{self.mean_reward:.17g},{self.kl_to_ref:.17g},"
                f"{self.tv_to_oracle:.17g},{self.nfe_cumulative},{self.ratio_warnings},"
                f"{self.wall_ms:.3f}")


@dataclass
class TrainState:
    field: LearnedField  # trainable policy
    field_old: LearnedField  # rollout snapshot, EMA-tracked
    field_ref: AnalyticGaussianField  # frozen reference
    adam: AdamState
    epoch: int = 0
    nfe_cumulative: int = 0
    diagnostics: RatioDiagnostics = dataclass_field(default_factory=RatioDiagnostics)
    skipped_groups: int = 0


def init_state(cfg) -> TrainState:
    """Build the policy as the analytic reference plus a zero residual.

    At initialization the policy equals the reference exactly, so the KL
    metric starts at zero and the reference stays available in closed
    form for oracles.
    """
    ref = AnalyticGaussianField(means=cfg.ref_means_array(), variances=cfg.ref_vars_array())
    fld = build_learned_field(
        data_dim=cfg.data_dim, n_conditions=cfg.n_conditions,
        hidden=list(cfg.model.hidden), embed_dim=cfg.model.embed_dim,
        rng=stream(cfg.seed, "init"), base=ref, zero_residual=True)
    old = fld.copy(trainable=False)
    adam = AdamState(learning_rate=cfg.train.learning_rate)
    return TrainState(field=fld, field_old=old, field_ref=ref, adam=adam)


def _epoch_conditions(cfg, epoch: int) -> np.ndarray:
    rng = stream(cfg.seed, "prompts", epoch)
    return rng.integers(cfg.n_conditions, size=cfg.train.prompts_per_epoch)


def _minibatch_slices(n_groups: int, n_steps: int) -> list[slice]:
    base = n_groups // n_steps
    sizes = [base] * n_steps
    sizes[-1] += n_groups - base * n_steps  # remainder joins the last batch
    out, start = [], 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


def run_epoch(state: TrainState, cfg) -> TrainState:
    """One full pass of the training loop; mutates and returns state."""
    epoch = state.epoch + 1
    conds = _epoch_conditions(cfg, epoch)
    record_traj = cfg.estimator.formula == "trajectory"
    sampler_cfg = cfg.sampler
    if record_traj and not sampler_cfg.record_trajectory:
        sampler_cfg = SamplerConfig(
            mode=sampler_cfg.mode, n_steps=sampler_cfg.n_steps,
            noise_level=sampler_cfg.noise_level, record_trajectory=True,
            start_clamp=sampler_cfg.start_clamp)

    groups: list[RolloutGroup] = []
    workspaces: list[LikelihoodWorkspace] = []
    for p, cond in enumerate(conds):
        cond = int(cond)
        member_rngs = [stream(cfg.seed, "rollout", epoch, p, g)
                       for g in range(cfg.train.group_size)]
        rollout = sample_group(state.field_old, sampler_cfg, cond, member_rngs)
        state.nfe_cumulative += rollout.nfe
        rewards = reward_batch(cfg.reward, rollout.terminal, cond)
        group = RolloutGroup(condition=cond, samples=rollout.terminal, rewards=rewards,
                             trajectories=rollout.trajectories)
        compute_advantages(group, cfg.objective)
        if group.skip:
            state.skipped_groups += 1
        est_rngs = [stream(cfg.seed, "estimator", epoch, p, g)
                    for g in range(cfg.train.group_size)]
        subjects = rollout.trajectories if record_traj else list(rollout.terminal)
        ws = prepare_workspace(subjects, np.full(cfg.train.group_size, cond),
                               state.field_old, state.field_ref, cfg.estimator,
                               n_grid=cfg.sampler.n_steps, member_rngs=est_rngs)
        groups.append(group)
        workspaces.append(ws)

    params = state.field.named_parameters()
    for batch in _minibatch_slices(len(groups), cfg.train.grad_steps_per_epoch):
        with ad.Tape() as tape:
            total = None
            for group, ws in zip(groups[batch], workspaces[batch]):
                terms = policy_terms(state.field, ws, state.diagnostics)
                loss = objective_loss(group, terms, cfg.objective)
                total = loss if total is None else ad.add(total, loss)
            n_in_batch = batch.stop - batch.start
            total = ad.mul(total, 1.0 / n_in_batch)
        if not np.isfinite(total.values):
            raise NumericalAbortError(
                "non-finite loss during gradient step",
                diagnostics={"epoch": epoch,
                             "groups": [g.condition for g in groups[batch]],
                             "rewards": [g.rewards.tolist() for g in groups[batch]]})
        # a batch of all-skipped groups records nothing differentiable; it
        # still takes an optimizer step, with an exactly-zero gradient
        grads = ad.backward(tape, total) if total.requires_grad else {}
        for _, p in params:
            if p not in grads:  # e.g. unused condition embeddings this batch
                grads[p] = np.zeros_like(p.values)
        adam_step(state.adam, params, grads)

    alpha = ema_decay(epoch, cfg.train.ema_decay_type)
    for (_, p_new), (_, p_old) in zip(state.field.named_parameters(),
                                      state.field_old.named_parameters()):
        p_old.values = (1.0 - alpha) * p_new.values + alpha * p_old.values
    state.epoch = epoch
    return state


def build_oracle_grids(cfg) -> list[GridDistribution]:
    """Per-condition target tilts on the verification grid."""
    grids = []
    ref_means, ref_vars = cfg.ref_means_array(), cfg.ref_vars_array()
    for c in range(cfg.n_conditions):
        ref_grid = diag_gaussian_grid(ref_means[c], ref_vars[c], bins=cfg.oracle_bins)
        rewards = reward_batch(cfg.reward, ref_grid.centers(), c)
        grids.append(grid_tilt(ref_grid, rewards, cfg.objective.beta))
    return grids


def evaluate(state: TrainState, cfg, oracle_grids: list[GridDistribution],
             epoch: int) -> tuple[float, float, float]:
    """Sample the current policy and report (mean reward, KL, TV).

    Evaluation rollouts do not touch the NFE counter: efficiency is
    charged for training compute only.
    """
    n = cfg.train.eval_samples
    rewards_all, kl_all, tv_all = [], [], []
    for c in range(cfg.n_conditions):
        member_rngs = [stream(cfg.seed, "eval", epoch, c, g) for g in range(n)]
        rollout = sample_group(state.field, cfg.sampler, c, member_rngs)
        x0 = rollout.terminal
        rewards_all.append(reward_batch(cfg.reward, x0, c))
        tv_all.append(tv_distance(x0, oracle_grids[c]))
        kl_rng = stream(cfg.seed, "eval-kl", epoch, c)
        grid = np.arange(1, cfg.sampler.n_steps + 1) / cfg.sampler.n_steps
        grid = grid[grid >= cfg.estimator.t_min]
        ts = grid[kl_rng.integers(grid.size, size=n)]
        eps = kl_rng.standard_normal(x0.shape)
        x_t = (1.0 - ts)[:, None] * x0 + ts[:, None] * eps
        conds = np.full(n, c)
        v = state.field.velocity(x_t, ts, conds)
        v_ref = state.field_ref.velocity(x_t, ts, conds)
        kl_all.append(((v - v_ref) ** 2).sum(axis=1))
    mean_reward = float(np.mean(np.concatenate(rewards_all)))
    kl_to_ref = float(np.mean(np.concatenate(kl_all)))
    tv_to_oracle = float(np.mean(tv_all))
    return mean_reward, kl_to_ref, tv_to_oracle


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def save_checkpoint(state: TrainState, out_dir: Path) -> None:
    arrays = {}
    for name, p in state.field.named_parameters():
        arrays[f"theta/{name}"] = p.values
    for name, p in state.field_old.named_parameters():
        arrays[f"theta_old/{name}"] = p.values
    np.savez(out_dir / "checkpoint.npz", **arrays)
    manifest = {
        "epoch": state.epoch,
        "nfe_cumulative": state.nfe_cumulative,
        "arrays": {k: list(v.shape) for k, v in sorted(arrays.items())},
    }
    (out_dir / "checkpoint_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(cfg, out_dir) -> TrainState:
    """Rebuild a TrainState from a run directory's checkpoint."""
    out_dir = Path(out_dir)
    state = init_state(cfg)
    with np.load(out_dir / "checkpoint.npz") as data:
        for name, p in state.field.named_parameters():
            p.values = np.array(data[f"theta/{name}"], dtype=np.float64)
        for name, p in state.field_old.named_parameters():
            p.values = np.array(data[f"theta_old/{name}"], dtype=np.float64)
    manifest = json.loads((out_dir / "checkpoint_manifest.json").read_text())
    state.epoch = int(manifest["epoch"])
    state.nfe_cumulative = int(manifest["nfe_cumulative"])
    return state


def run_experiment(cfg, out_dir) -> dict:
    """Full run: train, evaluate each epoch, emit metrics and summary.

    Writes metrics.csv, summary.json, checkpoint.npz(+manifest) into
    out_dir. On a numerical abort the partial metrics and an abort
    report are left behind and the error re-raised for the CLI to map
    to its exit code.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    state = init_state(cfg)
    oracle_grids = build_oracle_grids(cfg)
    rows: list[MetricsRow] = []
    expected_nfe_per_epoch = (cfg.train.prompts_per_epoch * cfg.train.group_size
                              * cfg.sampler.n_steps * STAGE_COUNT[cfg.sampler.mode])
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        try:
            for _ in range(cfg.train.epochs):
                t0 = time.perf_counter()
                state = run_epoch(state, cfg)
                mean_reward, kl_to_ref, tv_to_oracle = evaluate(state, cfg, oracle_grids,
                                                                state.epoch)
                wall_ms = (time.perf_counter() - t0) * 1e3
                row = MetricsRow(epoch=state.epoch, mean_reward=mean_reward,
                                 kl_to_ref=kl_to_ref, tv_to_oracle=tv_to_oracle,
                                 nfe_cumulative=state.nfe_cumulative,
                                 ratio_warnings=state.diagnostics.warnings,
                                 wall_ms=wall_ms)
                rows.append(row)
                fh.write(row.to_csv_line() + "\n")
                fh.flush()
        except NumericalAbortError as err:
            (out_dir / "abort.json").write_text(
                json.dumps({"message": str(err), "diagnostics": err.diagnostics},
                           indent=2, sort_keys=True, default=str) + "\n")
            raise
    if state.nfe_cumulative != cfg.train.epochs * expected_nfe_per_epoch:
        raise ContractViolation(
            f"NFE accounting drifted: {state.nfe_cumulative} != "
            f"{cfg.train.epochs * expected_nfe_per_epoch}")
    save_checkpoint(state, out_dir)
    summary = {
        "build_id": build_id(),
        "config": cfg.to_dict(),
        "final": {
            "epoch": rows[-1].epoch if rows else 0,
            "mean_reward": rows[-1].mean_reward if rows else None,
            "kl_to_ref": rows[-1].kl_to_ref if rows else None,
            "tv_to_oracle": rows[-1].tv_to_oracle if rows else None,
            "nfe_cumulative": state.nfe_cumulative,
            "ratio_warnings": state.diagnostics.warnings,
            "skipped_groups": state.skipped_groups,
        },
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_metrics(path) -> list[dict]:
    """Parse a metrics.csv back into typed dicts."""
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != METRICS_HEADER:
        raise ContractViolation(f"unexpected metrics header: {lines[0]!r}")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        out.append({
            "epoch": int(parts[0]), "mean_reward": float(parts[1]),
            "kl_to_ref": float(parts[2]), "tv_to_oracle": float(parts[3]),
            "nfe_cumulative": int(parts[4]), "ratio_warnings": int(parts[5]),
            "wall_ms": float(parts[6]),
        })
    return out


def nfe_to_reach(rows: list[dict], threshold: float, trail: int = 3) -> int | None:
    """Cumulative NFE at the first epoch whose trailing-mean reward
    clears the threshold; None if the run never does."""
    rewards = [r["mean_reward"] for r in rows]
    for i in range(len(rows)):
        lo = max(0, i - trail + 1)
        if float(np.mean(rewards[lo:i + 1])) >= threshold:
            return rows[i]["nfe_cumulative"]
    return None
