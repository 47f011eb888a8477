"""Flow-model substrate: the noising path, velocity fields, residuals.

The interpolation path is fixed and linear: x_t = (1-t) x0 + t eps, so the
conditional target velocity is eps - x0, time runs from data (t=0) to noise
(t=1), and the diffusion coefficient family is g_t = a sqrt(2t/(1-t)) with
a = 0 recovering the deterministic probability-flow sampler.

Two velocity-field kinds exist. The analytic field is the exact marginal
velocity of a diagonal Gaussian per condition; it needs no parameters and
doubles as the ground-truth oracle in tests. The learned field is an MLP
over (x, t, condition embedding), optionally added on top of a frozen
analytic base so that a freshly initialized policy is exactly its reference
distribution (the desk-scale analogue of adapter fine-tuning on a frozen
backbone).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericalAbortError
from .nets import MlpParams, forward_mlp, init_mlp


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-path schedule: alpha_t = 1-t, sigma_t = t."""

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def sigma(self, t: float) -> float:
        return t

    def g(self, t, noise_level: float):
        """Diffusion coefficient a*sqrt(2t/(1-t)); t must stay below 1."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t <= 0.0) or np.any(t >= 1.0):
            raise ContractViolation(f"g(t): t must lie in (0, 1), got {t}")
        return noise_level * np.sqrt(2.0 * t / (1.0 - t))

    def grid(self, n_steps: int) -> np.ndarray:
        """The sampling grid {1/N, 2/N, ..., 1}; N >= 2."""
        if n_steps < 2:
            raise ContractViolation("time grid needs at least 2 steps")
        return np.arange(1, n_steps + 1, dtype=np.float64) / n_steps


@dataclass
class FlowSample:
    """One noised data point: x_t = (1-t) x0 + t eps by construction."""

    x0: np.ndarray
    t: float
    eps: np.ndarray
    x_t: np.ndarray


def forward_noise(x0: np.ndarray, t: float, eps: np.ndarray) -> FlowSample:
    """Noise a data point to time t with the given draw."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractViolation(f"forward_noise: x0 shape {x0.shape} != eps shape {eps.shape}")
    if not (0.0 < t <= 1.0):
        raise ContractViolation(f"forward_noise: t must lie in (0, 1], got {t}")
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(eps))):
        raise ContractViolation("forward_noise: non-finite inputs")
    x_t = (1.0 - t) * x0 + t * eps
    return FlowSample(x0=x0, t=float(t), eps=eps, x_t=x_t)


class AnalyticGaussianField:
    """Exact marginal velocity of a diagonal Gaussian data distribution.

    For x0 ~ N(mu, diag(s^2)) per condition, the posterior-mean velocity is

        v(x, t) = (t - (1-t) s^2) / ((1-t)^2 s^2 + t^2) * (x - (1-t) mu) - mu

    applied per dimension.
    """

    kind = "analytic-gaussian"

    def __init__(self, means, variances):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
        if self.means.shape != self.variances.shape:
            raise ContractViolation("analytic field: means and variances must have equal shapes")
        if np.any(self.variances <= 0.0):
            raise ContractViolation("analytic field: variances must be positive")

    @property
    def n_conditions(self) -> int:
        return self.means.shape[0]

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    def velocity(self, x: np.ndarray, t, cond) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        cidx = _condition_indices(cond, xb.shape[0], self.n_conditions)
        mu = self.means[cidx]
        s2 = self.variances[cidx]
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (xb.shape[0], 1))
        one_m_t = 1.0 - tcol
        denom = one_m_t**2 * s2 + tcol**2
        coeff = (tcol - one_m_t * s2) / denom
        v = coeff * (xb - one_m_t * mu) - mu
        return v[0] if single else v


class LearnedField:
    """MLP velocity over features [x, t, embed(c)], plus optional analytic base."""

    kind = "learned-mlp"

    def __init__(
        self,
        mlp: MlpParams,
        embedding: Tensor,
        data_dim: int,
        base: AnalyticGaussianField | None = None,
    ):
        self.mlp = mlp
        self.embedding = embedding
        self.data_dim = int(data_dim)
        self.base = base
        expected_in = self.data_dim + 1 + embedding.shape[1]
        if mlp.input_dim != expected_in or mlp.output_dim != self.data_dim:
            raise ContractViolation(
                f"learned field: mlp maps {mlp.input_dim}->{mlp.output_dim}, "
                f"need {expected_in}->{self.data_dim}"
            )

    @property
    def n_conditions(self) -> int:
        return self.embedding.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"mlp.{name}", t) for name, t in self.mlp.named_tensors()]
        out.append(("embedding", self.embedding))
        return out

    def copy(self, trainable: bool = False) -> "LearnedField":
        emb = Tensor(self.embedding.values.copy(), requires_grad=trainable, name=self.embedding.name)
        return LearnedField(self.mlp.copy(trainable=trainable), emb, self.data_dim, self.base)

    def velocity_tensor(self, x: np.ndarray, t, cond) -> Tensor:
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = xb.shape[0]
        cidx = _condition_indices(cond, n, self.n_conditions)
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        feats = ad.hstack([
            ad.as_tensor(xb),
            ad.as_tensor(np.array(tcol)),
            ad.take_rows(self.embedding, cidx),
        ])
        out = forward_mlp(self.mlp, feats)
        if self.base is not None:
            out = ad.add(out, ad.as_tensor(self.base.velocity(xb, t, cond)))
        return out

    def velocity(self, x: np.ndarray, t, cond) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        with ad.no_grad():
            v = self.velocity_tensor(x, t, cond).values
        return v[0] if single else v


def _condition_indices(cond, batch: int, n_conditions: int) -> np.ndarray:
    idx = np.asarray(cond, dtype=np.intp)
    if idx.ndim == 0:
        idx = np.full(batch, int(idx), dtype=np.intp)
    if idx.shape != (batch,):
        raise ContractViolation(f"condition ids: expected scalar or ({batch},), got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= n_conditions):
        raise ContractViolation(
            f"condition id out of range: got {idx.min()}..{idx.max()}, have {n_conditions} conditions"
        )
    return idx


def build_learned_field(
    data_dim: int,
    n_conditions: int,
    hidden: list[int],
    embed_dim: int,
    rng: np.random.Generator,
    base: AnalyticGaussianField | None = None,
    zero_residual: bool = True,
) -> LearnedField:
    """Construct a learned field; with a base, the residual starts at zero."""
    sizes = [data_dim + 1 + embed_dim, *hidden, data_dim]
    mlp = init_mlp(sizes, rng, zero_last_layer=zero_residual and base is not None)
    bound = 1.0 / np.sqrt(max(embed_dim, 1))
    emb = ad.parameter(rng.uniform(-bound, bound, size=(n_conditions, embed_dim)), name="embedding")
    return LearnedField(mlp, emb, data_dim, base=base)


def eval_velocity(field, x, t, cond) -> np.ndarray:
    """Evaluate any field kind, with domain validation; returns plain arrays.

    t may be a scalar or one value per row; every t must lie in (0, 1].
    The upper endpoint is included because the all-timestep estimator grid
    ends at t = 1.
    """
    tarr = np.asarray(t, dtype=np.float64)
    if np.any(tarr <= 0.0) or np.any(tarr > 1.0):
        raise ContractViolation(f"eval_velocity: t must lie in (0, 1], got {t}")
    xarr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(xarr)):
        raise NumericalAbortError("eval_velocity: non-finite state",
                                  diagnostics={"t": float(tarr.reshape(-1)[0])})
    return field.velocity(xarr, tarr, cond)


def velocity_tensor(field, x, t, cond) -> Tensor:
    """Differentiable velocity evaluation; analytic fields yield constants."""
    if hasattr(field, "velocity_tensor"):
        return field.velocity_tensor(x, t, cond)
    return ad.as_tensor(field.velocity(np.atleast_2d(np.asarray(x, dtype=np.float64)), t, cond))


def fm_residual(field, sample: FlowSample, cond) -> Tensor:
    """Flow-matching residual v(x_t, t, c) - (eps - x0), differentiable."""
    target = sample.eps - sample.x0
    v = velocity_tensor(field, sample.x_t, sample.t, cond)
    single = sample.x_t.ndim == 1
    if single:
        v = ad.reshape(v, (v.shape[1],)) if v.values.ndim == 2 else v
    return ad.sub(v, ad.as_tensor(target))
