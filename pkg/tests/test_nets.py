"""MLP forward pass against a straight-line oracle; Adam exact updates."""

import numpy as np
import pytest

from _support import mlp_forward_reference
from flowtune import autodiff as ad
from flowtune.errors import ContractViolation, DimensionError, NumericalAbortError
from flowtune.nets import AdamState, MlpParams, adam_step, forward_mlp, init_mlp
from flowtune.rngs import stream


def test_zero_parameters_give_zero_output():
    mlp = init_mlp([2, 5, 3], stream(0, "zero"))
    for _, p in mlp.named_tensors():
        p.values = np.zeros_like(p.values)
    out = forward_mlp(mlp, np.array([[1.0, -4.0], [0.3, 2.0]]))
    np.testing.assert_array_equal(out.values, np.zeros((2, 3)))


def test_identity_linear_layer():
    mlp = MlpParams(weights=[ad.parameter(np.eye(2), name="w0")],
                    biases=[ad.parameter(np.zeros(2), name="b0")])
    out = forward_mlp(mlp, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out.values, np.array([1.0, 2.0]))


def test_seeded_net_matches_reference_forward_pass():
    mlp = init_mlp([2, 16, 2], stream(11, "ref-forward"))
    x = stream(12, "ref-input").standard_normal((6, 2))
    out = forward_mlp(mlp, x)
    np.testing.assert_allclose(out.values, mlp_forward_reference(mlp, x),
                               rtol=0, atol=1e-14)


def test_input_shape_mismatch_is_a_dimension_error():
    mlp = init_mlp([3, 4, 1], stream(0, "shape"))
    with pytest.raises(DimensionError):
        forward_mlp(mlp, np.ones((2, 2)))


def test_zero_last_layer_initialization():
    mlp = init_mlp([2, 8, 2], stream(5, "zl"), zero_last_layer=True)
    assert np.all(mlp.weights[-1].values == 0.0)
    assert np.all(mlp.biases[-1].values == 0.0)
    assert np.any(mlp.weights[0].values != 0.0)
    out = forward_mlp(mlp, np.array([[0.4, -0.2]]))
    np.testing.assert_array_equal(out.values, np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Adam


def _one_param(values):
    p = ad.parameter(np.asarray(values, dtype=np.float64), name="w0")
    return [("w0", p)], p


def test_adam_zero_gradients_from_fresh_state_change_nothing():
    named, p = _one_param([1.0, -2.0])
    before = p.values.copy()
    state = AdamState(learning_rate=0.1)
    adam_step(state, named, {p: np.zeros(2)})
    np.testing.assert_array_equal(p.values, before)
    np.testing.assert_array_equal(state.m["w0"], np.zeros(2))
    np.testing.assert_array_equal(state.v["w0"], np.zeros(2))
    assert state.step == 1


def test_adam_zero_gradient_step_decays_moments_exactly():
    named, p = _one_param([0.0])
    state = AdamState(learning_rate=0.01)
    adam_step(state, named, {p: np.array([2.0])})
    m1, v1 = state.m["w0"].copy(), state.v["w0"].copy()
    adam_step(state, named, {p: np.array([0.0])})
    np.testing.assert_allclose(state.m["w0"], state.beta1 * m1, rtol=0, atol=0)
    np.testing.assert_allclose(state.v["w0"], state.beta2 * v1, rtol=0, atol=0)


def test_adam_single_step_matches_hand_recurrence():
    # fresh state: m_hat = g, v_hat = g^2, so delta = -lr g / (|g| + eps)
    g = np.array([0.3, -1.7, 0.0002])
    named, p = _one_param([1.0, 1.0, 1.0])
    state = AdamState(learning_rate=0.05)
    adam_step(state, named, {p: g.copy()})
    expected = 1.0 - 0.05 * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(p.values, expected, rtol=0, atol=1e-15)


def test_adam_constant_gradient_update_magnitude_approaches_learning_rate():
    named, p = _one_param([0.0])
    state = AdamState(learning_rate=0.01)
    g = np.array([0.7])
    prev = p.values.copy()
    for _ in range(3000):
        prev = p.values.copy()
        adam_step(state, named, {p: g.copy()})
    last_step = np.abs(p.values - prev)[0]
    assert 0.0099 < last_step <= 0.01 + 1e-12


def test_adam_rejects_nonfinite_gradient_with_diagnostics():
    named, p = _one_param([1.0])
    state = AdamState(learning_rate=0.1)
    with pytest.raises(NumericalAbortError, match="w0"):
        adam_step(state, named, {p: np.array([np.nan])})


def test_adam_requires_every_gradient():
    named, p = _one_param([1.0])
    state = AdamState(learning_rate=0.1)
    with pytest.raises(ContractViolation, match="missing gradient"):
        adam_step(state, named, {})


def test_adam_does_not_mutate_recorded_value_arrays():
    # the tape may still hold the old array; updates must swap, not write
    named, p = _one_param([1.0])
    old_array = p.values
    state = AdamState(learning_rate=0.1)
    adam_step(state, named, {p: np.array([1.0])})
    assert old_array[0] == 1.0
    assert p.values is not old_array
