"""Reverse-process samplers: stochastic Euler and deterministic Euler/Heun.

The reverse dynamics follow

    dx = [v(x, t) + (g_t^2 / 2t) (x + (1-t) v(x, t))] dt + g_t dw

integrated from t = 1 down to t = 0. One sign convention matters and is
easy to get wrong: stepping from t_i to t_{i-1} uses

    x_{t_{i-1}} = x_{t_i} - (t_i - t_{i-1}) * drift(x_{t_i}, t_i) + g sqrt(dt) xi.

The minus sign is forced by marginal preservation: with the analytic
N(0, I) field the terminal samples must reproduce unit variance (the
terminal-marginal oracle in the tests); the plus variant amplifies
variance instead. The trajectory likelihood estimator mirrors this exact
transition so that sampled paths and their evaluated densities describe
the same process.

Integration starts at t = 1 - delta (the diffusion coefficient diverges at
t = 1) from a standard normal draw, then walks the grid {(N-1)/N, ..., 1/N, 0}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EstimatorConstraintError, NumericalAbortError
from .flow import NoiseSchedule, eval_velocity

SDE_EULER = "sde-euler"
ODE_EULER = "ode-euler"
ODE_HEUN2 = "ode-heun2"
SAMPLER_MODES = (SDE_EULER, ODE_EULER, ODE_HEUN2)

# velocity-field evaluations per integration step, by mode
STAGE_COUNT = {SDE_EULER: 1, ODE_EULER: 1, ODE_HEUN2: 2}


@dataclass
class SamplerConfig:
    mode: str = ODE_HEUN2
    n_steps: int = 10
    noise_level: float = 0.7  # ignored (treated as 0) by the ODE modes
    record_trajectory: bool = False
    start_clamp: float = 1e-3  # integration starts at t = 1 - start_clamp

    def validate(self) -> None:
        if self.mode not in SAMPLER_MODES:
            raise ContractViolation(f"unknown sampler mode {self.mode!r}")
        if self.n_steps < 2:
            raise ContractViolation("sampler needs at least 2 steps")
        if not (0.0 < self.start_clamp < 1.0 / self.n_steps):
            raise ContractViolation(
                f"start clamp must lie in (0, 1/n_steps); got {self.start_clamp} with n_steps={self.n_steps}"
            )
        if self.mode == SDE_EULER and not (0.0 < self.noise_level <= 1.0):
            raise ContractViolation("sde-euler needs noise_level in (0, 1]")

    @property
    def effective_noise_level(self) -> float:
        return self.noise_level if self.mode == SDE_EULER else 0.0

    @property
    def effective_start_clamp(self) -> float:
        """Start clamp actually used by integration.

        The stochastic mode needs a larger clamp than the deterministic ones:
        near t = 1 the drift stiffness scales like a^2/(1-t), and an explicit
        Euler step of size ~1/N is only stable when the first node satisfies
        (1 - t) >~ a^2/N. A floor of 1/(2N) restores the terminal-marginal
        oracle (unit variance for the analytic unit-Gaussian field), which
        the bare default clamp measurably violates at moderate step counts.
        """
        if self.mode == SDE_EULER:
            return max(self.start_clamp, 1.0 / (2.0 * self.n_steps))
        return self.start_clamp

    @property
    def stage_count(self) -> int:
        return STAGE_COUNT[self.mode]


@dataclass
class Trajectory:
    """States along one reverse pass, first entry at t = 1 - delta, last at 0."""

    timesteps: np.ndarray
    states: np.ndarray  # [len(timesteps), d]
    mode: str
    noise_level: float
    condition: int

    def to_record(self) -> dict:
        return {
            "timesteps": self.timesteps.tolist(),
            "states": self.states.tolist(),
            "mode": self.mode,
            "noise_level": self.noise_level,
            "condition": self.condition,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Trajectory":
        return cls(
            timesteps=np.asarray(record["timesteps"], dtype=np.float64),
            states=np.asarray(record["states"], dtype=np.float64),
            mode=str(record["mode"]),
            noise_level=float(record["noise_level"]),
            condition=int(record["condition"]),
        )


@dataclass
class GroupSample:
    """One group of rollouts for a shared condition."""

    terminal: np.ndarray  # [G, d]
    trajectories: list[Trajectory] | None
    nfe: int
    condition: int


def reverse_drift(field, x, t, cond, noise_level: float, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Drift of the reverse process at (x, t); pure velocity when a = 0."""
    schedule = schedule or NoiseSchedule()
    if not (0.0 < t < 1.0):
        raise ContractViolation(f"reverse_drift: t must lie in (0, 1), got {t}")
    v = eval_velocity(field, x, t, cond)
    if noise_level == 0.0:
        return v
    g2 = float(schedule.g(t, noise_level) ** 2)
    return v + (g2 / (2.0 * t)) * (np.asarray(x, dtype=np.float64) + (1.0 - t) * v)


def heun2_step(field, x, t: float, dt: float, cond, t_floor: float = 1e-3) -> np.ndarray:
    """One two-stage Heun step of the probability-flow ODE, from t to t - dt.

    The correction stage evaluates at max(t - dt, t_floor) so the final step
    to t = 0 stays inside the field's time domain.
    """
    if dt <= 0.0 or t - dt < -1e-12:
        raise ContractViolation(f"heun2_step: need 0 < dt <= t, got t={t}, dt={dt}")
    x = np.asarray(x, dtype=np.float64)
    k1 = eval_velocity(field, x, t, cond)
    x_pred = x - dt * k1
    t_next = max(t - dt, t_floor)
    k2 = eval_velocity(field, x_pred, t_next, cond)
    return x - 0.5 * dt * (k1 + k2)


def integration_times(cfg: SamplerConfig, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Descending node times [1-delta, (N-1)/N, ..., 1/N, 0]."""
    schedule = schedule or NoiseSchedule()
    grid = schedule.grid(cfg.n_steps)
    nodes = np.concatenate([grid[::-1], [0.0]])
    nodes[0] = 1.0 - cfg.effective_start_clamp
    return nodes


def sample_group(
    field,
    cfg: SamplerConfig,
    cond: int,
    member_rngs: list[np.random.Generator],
    schedule: NoiseSchedule | None = None,
) -> GroupSample:
    """Integrate a whole group of rollouts for one condition.

    Each member owns its RNG: the initial draw and, for the stochastic mode,
    one increment per step come from that stream, so group size never
    perturbs the noise any single member sees.
    """
    cfg.validate()
    schedule = schedule or NoiseSchedule()
    a = cfg.effective_noise_level
    nodes = integration_times(cfg, schedule)
    n_steps = cfg.n_steps
    g_size = len(member_rngs)
    d = field.data_dim

    x = np.stack([rng.standard_normal(d) for rng in member_rngs])
    if a > 0.0:
        increments = np.stack([rng.standard_normal((n_steps, d)) for rng in member_rngs])

    states = None
    if cfg.record_trajectory:
        states = np.empty((g_size, n_steps + 1, d))
        states[:, 0] = x

    nfe = 0
    for k in range(n_steps):
        t_hi, t_lo = nodes[k], nodes[k + 1]
        dt = t_hi - t_lo
        if cfg.mode == ODE_HEUN2:
            x = heun2_step(field, x, t_hi, dt, cond, t_floor=cfg.effective_start_clamp)
            nfe += 2 * g_size
        else:
            drift = reverse_drift(field, x, t_hi, cond, a, schedule)
            x = x - dt * drift
            nfe += g_size
            if a > 0.0:
                x = x + float(schedule.g(t_hi, a)) * np.sqrt(dt) * increments[:, k]
        if not np.all(np.isfinite(x)):
            raise NumericalAbortError(
                "sampler state became non-finite",
                diagnostics={"step": k, "t": float(t_hi), "max_abs": float(np.nanmax(np.abs(x)))},
            )
        if states is not None:
            states[:, k + 1] = x

    trajectories = None
    if cfg.record_trajectory:
        trajectories = [
            Trajectory(timesteps=nodes.copy(), states=states[i].copy(), mode=cfg.mode,
                       noise_level=a, condition=int(cond))
            for i in range(g_size)
        ]
    return GroupSample(terminal=x, trajectories=trajectories, nfe=nfe, condition=int(cond))


def sample_one(field, cfg: SamplerConfig, cond: int, rng: np.random.Generator,
               schedule: NoiseSchedule | None = None) -> GroupSample:
    return sample_group(field, cfg, cond, [rng], schedule)


def require_sde_trajectory(trajectory: Trajectory) -> None:
    """Trajectory-density formulas need strictly positive transition noise."""
    if trajectory.mode != SDE_EULER or trajectory.noise_level <= 0.0:
        raise EstimatorConstraintError(
            "trajectory likelihood needs a stochastic trajectory: deterministic "
            "transitions have degenerate (zero-variance) Gaussian densities; "
            "sample with sde-euler and noise_level > 0"
        )
