"""Shared builders for the test suite: tiny fields, independent oracles."""

from __future__ import annotations

import numpy as np

from flowtune import autodiff as ad
from flowtune.flow import AnalyticGaussianField, LearnedField, build_learned_field
from flowtune.nets import MlpParams
from flowtune.rngs import stream


def std_normal_field(dim: int = 1) -> AnalyticGaussianField:
    return AnalyticGaussianField(means=np.zeros((1, dim)), variances=np.ones((1, dim)))


def zero_field(dim: int = 1, n_conditions: int = 1) -> LearnedField:
    """A learned field that computes exactly zero velocity everywhere."""
    fld = build_learned_field(data_dim=dim, n_conditions=n_conditions, hidden=[4],
                              embed_dim=2, rng=stream(0, "zero-field"))
    for _, p in fld.named_parameters():
        p.values = np.zeros_like(p.values)
    return fld


def tiny_learned_field(seed: int = 0, dim: int = 1, base=None) -> LearnedField:
    """Small random field for ratio/gradient tests; nonzero everywhere."""
    fld = build_learned_field(data_dim=dim, n_conditions=1, hidden=[5], embed_dim=2,
                              rng=stream(seed, "tiny-field"), base=base,
                              zero_residual=False)
    return fld


class ConstField:
    """Stub field returning a fixed velocity vector; duck-types the field API."""

    kind = "const"

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.data_dim = self.value.size
        self.n_conditions = 1

    def velocity(self, x, t, cond):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.value.copy()
        return np.tile(self.value, (x.shape[0], 1))


class LinearField:
    """v(x, t) = lam * x, time-independent; exact ODE flow is exponential."""

    kind = "linear"

    def __init__(self, lam: float, dim: int = 1):
        self.lam = float(lam)
        self.data_dim = dim
        self.n_conditions = 1

    def velocity(self, x, t, cond):
        with np.errstate(over="ignore"):  # blow-up tests drive this to inf
            return self.lam * np.asarray(x, dtype=np.float64)


def gaussian_logpdf(x, mean, var):
    """Independent straight-line Gaussian log-density (the test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    return float(-0.5 * np.sum((x - mean) ** 2) / var
                 - 0.5 * x.size * np.log(2.0 * np.pi * var))


def posterior_velocity(x_t, t, ref_mean, ref_var):
    """E[eps - x0 | x_t] for x0 ~ N(ref_mean, ref_var), eps ~ N(0, 1).

    Straight-line conditional-Gaussian algebra, written independently of
    the package's analytic field.
    """
    var_t = (1.0 - t) ** 2 * ref_var + t ** 2
    gap = x_t - (1.0 - t) * ref_mean
    e_x0 = ref_mean + (1.0 - t) * ref_var / var_t * gap
    e_eps = t / var_t * gap
    return e_eps - e_x0


def mlp_forward_reference(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Straight-line numpy re-implementation of the tanh MLP forward pass."""
    h = np.asarray(x, dtype=np.float64)
    n = len(params.weights)
    for i in range(n):
        h = h @ params.weights[i].values + params.biases[i].values
        if i < n - 1:
            h = np.tanh(h)
    return h


def make_tensor_params(arrays):
    return [ad.parameter(np.asarray(a, dtype=np.float64), name=f"p{i}")
            for i, a in enumerate(arrays)]
