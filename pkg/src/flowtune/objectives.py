"""Group advantages and the four policy-gradient losses.

All four objectives are emitted as minimizable scalar losses over one
rollout group, with a positive KL penalty, so they share the tilted
optimum pi* proportional to pi_ref * exp(R / beta):

* ``epg``: plain REINFORCE with a stopped-gradient importance ratio,
  -mean[ sg(rho) * A * loglik - beta * kl ]. No clipping, no advantage
  normalization; gradient flows through the log-likelihood and kl only.
* ``pepg``: proximal update in distribution space,
  mean[ (log sg(rho) - A_pepg) * rho + eta * kl ], A_pepg = (eta/beta) A.
* ``par``: regression of the log ratio onto the scaled advantage,
  mean[ 0.5 * sg(rho) * (A_par - log rho)^2 + eta * kl ].
* ``grpo``: clipped surrogate with std-normalized advantages,
  mean[ -min(rho * A, clip(rho, 1-eps, 1+eps) * A) + beta * kl ].

Degenerate reward groups (zero spread) are meaningful only for grpo,
where std normalization would blow up: they carry a skip flag and
contribute exactly zero loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation

OBJECTIVE_KINDS = ("epg", "pepg", "par", "grpo")
ADVANTAGE_NORMS = ("mean-centered", "mean-std")


@dataclass
class ObjectiveConfig:
    kind: str = "epg"
    beta: float = 1e-3  # KL penalty strength; also the tilt temperature
    eta: float = 1e-4  # proximal step size (pepg, par)
    clip_epsilon: float = 0.2  # grpo ratio clip half-width
    advantage_norm: str | None = None  # default: mean-std for grpo, else mean-centered
    std_floor: float = 1e-8

    def validate(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}", field="objective.kind")
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive", field="objective.beta")
        if self.kind in ("pepg", "par") and self.eta <= 0.0:
            raise ConfigError("eta must be positive for proximal objectives", field="objective.eta")
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ConfigError("clip_epsilon must lie in (0, 1)", field="objective.clip_epsilon")
        if self.std_floor <= 0.0:
            raise ConfigError("std_floor must be positive", field="objective.std_floor")
        if self.advantage_norm is not None and self.advantage_norm not in ADVANTAGE_NORMS:
            raise ConfigError(f"unknown advantage norm {self.advantage_norm!r}",
                              field="objective.advantage_norm")

    @property
    def resolved_advantage_norm(self) -> str:
        if self.advantage_norm is not None:
            return self.advantage_norm
        return "mean-std" if self.kind == "grpo" else "mean-centered"


@dataclass
class RolloutGroup:
    """One condition's G rollouts with their rewards and advantages."""

    condition: int
    samples: np.ndarray  # [G, d] terminal samples
    rewards: np.ndarray  # [G]
    advantages: np.ndarray | None = None
    trajectories: list | None = None
    ratio_values: np.ndarray | None = None
    log_ratio_values: np.ndarray | None = None
    skip: bool = False

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if self.rewards.shape[0] != self.samples.shape[0]:
            raise ContractViolation(
                f"group has {self.samples.shape[0]} samples but {self.rewards.shape[0]} rewards")
        if self.samples.shape[0] < 2:
            raise ConfigError("a rollout group needs at least 2 members", field="train.group_size")

    @property
    def group_size(self) -> int:
        return self.samples.shape[0]

    def require_advantages(self) -> np.ndarray:
        if self.advantages is None:
            raise ContractViolation("advantages have not been computed for this group")
        return self.advantages


def advantage_epg(rewards) -> np.ndarray:
    """Mean-centered rewards; sums to zero."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise ConfigError("advantage baselines need at least 2 rewards", field="train.group_size")
    return r - r.mean()


def advantage_grpo(rewards, std_floor: float = 1e-8) -> tuple[np.ndarray, bool]:
    """(R - mean) / (population std + floor); zero spread -> zeros + skip."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise ConfigError("advantage baselines need at least 2 rewards", field="train.group_size")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered * centered)))
    if std < std_floor:
        return np.zeros_like(r), True
    return centered / (std + std_floor), False


def compute_advantages(group: RolloutGroup, cfg: ObjectiveConfig) -> RolloutGroup:
    """Fill group.advantages (and skip flag) per the configured normalization."""
    cfg.validate()
    if cfg.resolved_advantage_norm == "mean-std":
        group.advantages, group.skip = advantage_grpo(group.rewards, cfg.std_floor)
    else:
        group.advantages = advantage_epg(group.rewards)
        group.skip = False
    return group


def _ratio_values(ratios) -> np.ndarray:
    return ratios.values if isinstance(ratios, Tensor) else np.asarray(ratios, dtype=np.float64)


def _require_tensor(x, what: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractViolation(f"{what} must be a differentiable tensor")
    return x


def loss_epg(group: RolloutGroup, ratios, loglik_new, kl, cfg: ObjectiveConfig) -> Tensor:
    """REINFORCE with stopped ratio: -mean[sg(rho) A loglik - beta kl]."""
    loglik_new = _require_tensor(loglik_new, "loglik_new")
    kl = _require_tensor(kl, "kl")
    adv = group.require_advantages()
    coeff = -ad.pinned_value(_ratio_values(ratios)) * adv
    terms = ad.add(ad.mul(loglik_new, ad.as_tensor(coeff)), ad.mul(kl, cfg.beta))
    return ad.mean_all(terms)


def loss_pepg(group: RolloutGroup, ratios, log_ratios, kl, cfg: ObjectiveConfig) -> Tensor:
    """Proximal update: mean[(log sg(rho) - A_pepg) rho + eta kl]."""
    ratios = _require_tensor(ratios, "ratios")
    kl = _require_tensor(kl, "kl")
    a_pepg = (cfg.eta / cfg.beta) * group.require_advantages()
    coeff = ad.pinned_value(_ratio_values(log_ratios)) - a_pepg  # detached log ratio
    terms = ad.add(ad.mul(ratios, ad.as_tensor(coeff)), ad.mul(kl, cfg.eta))
    return ad.mean_all(terms)


def loss_par(group: RolloutGroup, ratios, log_ratios, kl, cfg: ObjectiveConfig) -> Tensor:
    """Advantage regression: mean[0.5 sg(rho) (A_par - log rho)^2 + eta kl]."""
    log_ratios = _require_tensor(log_ratios, "log_ratios")
    kl = _require_tensor(kl, "kl")
    a_par = (cfg.eta / cfg.beta) * group.require_advantages()
    gap = ad.sub(ad.as_tensor(a_par), log_ratios)
    sq = ad.mul(ad.mul(gap, gap), ad.as_tensor(0.5 * ad.pinned_value(_ratio_values(ratios))))
    terms = ad.add(sq, ad.mul(kl, cfg.eta))
    return ad.mean_all(terms)


def loss_grpo(group: RolloutGroup, ratios, kl, cfg: ObjectiveConfig) -> Tensor:
    """Clipped surrogate: mean[-min(rho A, clip(rho) A) + beta kl].

    A skip-flagged group (zero reward spread) contributes exactly zero.
    """
    if group.skip:
        return ad.as_tensor(0.0)
    ratios = _require_tensor(ratios, "ratios")
    kl = _require_tensor(kl, "kl")
    adv = ad.as_tensor(group.require_advantages())
    lo, hi = 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon
    surrogate = ad.minimum(ad.mul(ratios, adv), ad.mul(ad.clip(ratios, lo, hi), adv))
    terms = ad.add(ad.neg(surrogate), ad.mul(kl, cfg.beta))
    return ad.mean_all(terms)


def objective_loss(group: RolloutGroup, terms, cfg: ObjectiveConfig) -> Tensor:
    """Dispatch on cfg.kind given a PolicyTerms bundle from the estimator."""
    cfg.validate()
    if cfg.kind == "epg":
        return loss_epg(group, terms.ratio_values, terms.loglik, terms.kl, cfg)
    if cfg.kind == "pepg":
        return loss_pepg(group, terms.ratio, terms.log_ratio.values, terms.kl, cfg)
    if cfg.kind == "par":
        return loss_par(group, terms.ratio_values, terms.log_ratio, terms.kl, cfg)
    if cfg.kind == "grpo":
        return loss_grpo(group, terms.ratio, terms.kl, cfg)
    raise ConfigError(f"unknown objective kind {cfg.kind!r}", field="objective.kind")
