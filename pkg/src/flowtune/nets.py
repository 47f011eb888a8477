"""Small fully-connected networks and the Adam optimizer.

Everything here is deliberately plain: fixed-depth MLPs with a tanh-class
hidden activation and a linear head, fan-in-scaled uniform initialization
from a seeded generator, and textbook bias-corrected Adam. The only
non-obvious policy is the hard abort on non-finite gradients; silently
clipping them would invalidate the estimator comparisons this package
exists to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DimensionError, NumericalAbortError

_ACTIVATIONS = {
    "tanh": ad.tanh,
}


@dataclass
class MlpParams:
    """Weights and biases of a fully-connected network.

    ``weights[l]`` has shape [fan_in, fan_out]; hidden layers apply the
    activation, the final layer is linear.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "tanh"

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out

    def copy(self, trainable: bool = False) -> "MlpParams":
        ws = [Tensor(w.values.copy(), requires_grad=trainable, name=w.name) for w in self.weights]
        bs = [Tensor(b.values.copy(), requires_grad=trainable, name=b.name) for b in self.biases]
        return MlpParams(ws, bs, self.activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(
    layer_sizes: list[int],
    rng: np.random.Generator,
    activation: str = "tanh",
    zero_last_layer: bool = False,
) -> MlpParams:
    """Initialize an MLP with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws.

    ``zero_last_layer`` zeroes the output layer so the freshly built network
    computes exactly zero; residual velocity fields rely on this to start
    as an exact copy of their analytic base.
    """
    if activation not in _ACTIVATIONS:
        raise ContractViolation(f"unknown activation {activation!r}")
    if len(layer_sizes) < 2:
        raise ContractViolation("need at least input and output sizes")
    weights, biases = [], []
    last = len(layer_sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if zero_last_layer and i == last:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        weights.append(ad.parameter(w, name=f"w{i}"))
        biases.append(ad.parameter(b, name=f"b{i}"))
    return MlpParams(weights, biases, activation)


def forward_mlp(params: MlpParams, x) -> Tensor:
    """Run the network; accepts [B, in] or a single [in] vector."""
    x = ad.as_tensor(x)
    single = x.values.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.values.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError("forward_mlp", ("B", params.input_dim), x.shape)
    act = _ACTIVATIONS[params.activation]
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    if single:
        h = ad.reshape(h, (h.shape[1],))
    return h


@dataclass
class AdamState:
    """Optimizer state: first/second moment accumulators keyed by name."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    named_params: list[tuple[str, Tensor]],
    grads: dict[Tensor, np.ndarray],
) -> None:
    """One bias-corrected Adam update over ``named_params``.

    Every parameter must have a gradient entry; a non-finite gradient
    aborts with diagnostics naming the parameter. Parameter tensors receive
    fresh value arrays (recorded arrays are never mutated in place).
    """
    for name, p in named_params:
        g = grads.get(p)
        if g is None:
            raise ContractViolation(f"adam_step: missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalAbortError(
                f"non-finite gradient for parameter {name!r}",
                diagnostics={
                    "parameter": name,
                    "non_finite_entries": bad,
                    "shape": list(g.shape),
                    "step": state.step,
                },
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named_params:
        g = grads[p]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.values = p.values - update
