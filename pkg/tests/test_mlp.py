import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kktrecon.mlp import (InitScheme, MarginJacobian, MlpParams, forward, grad_theta_margin, grad_x_margin,
                          init_params, margin, margins_from_logits, mixed_vjp, runner_up)
from oracles import central_difference, plain_logits, plain_margin, relative_error
from conftest import generic_points


def test_init_variance_standard_and_small_first_layer():
    p = init_params(InitScheme("standard", 0), [3072, 1000, 10])
    assert abs(p.layer_weights[0].var() * 3072 - 1) < 0.05
    assert abs(p.layer_weights[1].var() * 1000 - 1) < 0.05
    q = init_params(InitScheme("small_first_layer", 0), [3072, 1000, 10])
    assert abs(q.layer_weights[0].var() * 3072 ** 1.5 - 1) < 0.05
    assert abs(q.layer_weights[1].var() * 1000 - 1) < 0.05


def test_init_is_seeded():
    a = init_params(InitScheme("standard", 7), [5, 4, 3])
    b = init_params(InitScheme("standard", 7), [5, 4, 3])
    c = init_params(InitScheme("standard", 8), [5, 4, 3])
    assert all(np.array_equal(u, v) for u, v in zip(a.layer_weights, b.layer_weights))
    assert not np.array_equal(a.layer_weights[0], c.layer_weights[0])


def test_init_scheme_exponents():
    assert InitScheme("standard").exponents(3) == [1.0, 1.0, 1.0]
    assert InitScheme("small_first_layer").exponents(3) == [1.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        InitScheme("small_first_layer", scale_exponent=1.0)
    with pytest.raises(ValueError):
        InitScheme("xavier")


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_params(InitScheme(), [5])
    with pytest.raises(ValueError):
        init_params(InitScheme(), [5, 0, 2])


def test_forward_zero_input_gives_zero(tiny_params):
    assert np.array_equal(forward(tiny_params, np.zeros(6)), np.zeros(3))


def test_forward_positive_homogeneity_in_x(tiny_params, rng):
    x = rng.normal(size=6)
    for c in (0.5, 2.0, 7.3):
        np.testing.assert_allclose(forward(tiny_params, c * x), c * forward(tiny_params, x), rtol=1e-12)


def test_forward_hand_computed():
    W1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    W2 = np.array([[1.0, 0.0], [-2.0, 3.0]])
    p = MlpParams([W1, W2])
    # z1 = W1^T x = (1*1 + 2*2, -1*1 + 0.5*2) = (5, 0); relu -> (5, 0)
    # z2 = W2^T a = (5*1 + 0*-2, 5*0 + 0*3) = (5, 0)
    np.testing.assert_array_equal(forward(p, [1.0, 2.0]), [5.0, 0.0])
    # x = (1, -1): z1 = (-1, -1.5) -> relu 0 -> logits 0
    np.testing.assert_array_equal(forward(p, [1.0, -1.0]), [0.0, 0.0])


def test_forward_matches_plain_oracle(tiny_params, rng):
    X = rng.normal(size=(10, 6))
    np.testing.assert_allclose(forward(tiny_params, X), plain_logits(tiny_params.layer_weights, X), rtol=1e-13)


def test_forward_shape_mismatch(tiny_params):
    with pytest.raises(ValueError):
        forward(tiny_params, np.zeros(5))


@pytest.mark.parametrize("L", [1, 2, 3])
def test_homogeneity_in_theta(rng, L):
    dims = [5] + [7] * (L - 1) + [4]
    p = init_params(InitScheme("standard", 1), dims)
    x = rng.normal(size=(3, 5))
    c = 1.7
    np.testing.assert_allclose(forward(p.scaled(c), x), c ** L * forward(p, x), rtol=1e-12)


def test_margin_examples():
    p = MlpParams([np.eye(3)])
    assert margin(p, [1.0, 1.0, 1.0], 0) == 0.0
    assert margin(p, [3.0, 1.0, 1.0], 0) == 2.0
    assert margin(p, [1.0, 3.0, 2.0], 2) == -1.0


def test_runner_up_ties_go_to_lowest_index():
    logits = np.array([[5.0, 1.0, 1.0], [1.0, 1.0, 5.0], [2.0, 2.0, 2.0]])
    assert runner_up(logits, np.array([0, 2, 1])).tolist() == [1, 0, 0]
    np.testing.assert_array_equal(margins_from_logits(logits, np.array([0, 2, 1])), [4.0, 4.0, 0.0])


def test_margin_rejects_bad_label(tiny_params):
    with pytest.raises(ValueError):
        margin(tiny_params, np.zeros(6), 3)


def test_grad_theta_linear_closed_form(rng):
    W = rng.normal(size=(4, 3))
    p = MlpParams([W])
    x = rng.normal(size=4)
    y = 1
    j = int(np.argmax(np.where(np.arange(3) == y, -np.inf, x @ W)))
    expected = np.zeros((4, 3))
    expected[:, y] = x
    expected[:, j] -= x
    np.testing.assert_array_equal(grad_theta_margin(p, x, y), expected.ravel())
    np.testing.assert_array_equal(grad_x_margin(p, x, y), W[:, y] - W[:, j])


def test_grad_theta_zero_input(tiny_params):
    assert np.array_equal(grad_theta_margin(tiny_params, np.zeros(6), 0), np.zeros(tiny_params.n_params))


def test_grad_theta_matches_finite_differences(tiny_params, rng):
    for X, y in generic_points(tiny_params, rng, 20):
        x, label = X[0], int(y[0])
        fd = central_difference(lambda t: plain_margin(tiny_params.unflatten(t), x, label), tiny_params.flatten())
        assert relative_error(grad_theta_margin(tiny_params, x, label), fd) <= 1e-6


def test_grad_x_matches_finite_differences(tiny_params, rng):
    for X, y in generic_points(tiny_params, rng, 20):
        x, label = X[0], int(y[0])
        fd = central_difference(lambda v: plain_margin(tiny_params.layer_weights, v, label), x)
        assert relative_error(grad_x_margin(tiny_params, x, label), fd) <= 1e-6


def test_grad_x_scales_quadratically_with_theta_for_two_layers(tiny_params, rng):
    x = rng.normal(size=6)
    c = 1.9
    np.testing.assert_allclose(grad_x_margin(tiny_params.scaled(c), x, 1), c ** 2 * grad_x_margin(tiny_params, x, 1),
                               rtol=1e-12)


def test_mixed_vjp_matches_finite_differences(tiny_params, rng):
    for X, y in generic_points(tiny_params, rng, 20):
        x, label = X[0], int(y[0])
        r = rng.normal(size=tiny_params.n_params)

        def s(v):
            return float(r @ grad_theta_margin(tiny_params, v, label))

        fd = central_difference(s, x)
        assert relative_error(mixed_vjp(tiny_params, x, label, r), fd) <= 1e-6


def test_mixed_vjp_linear_closed_form(rng):
    W = rng.normal(size=(4, 3))
    p = MlpParams([W])
    x = rng.normal(size=4)
    y = 2
    j = int(np.argmax(np.where(np.arange(3) == y, -np.inf, x @ W)))
    r = rng.normal(size=12)
    R = r.reshape(4, 3)
    np.testing.assert_allclose(mixed_vjp(p, x, y, r), R[:, y] - R[:, j], rtol=1e-14)


def test_mixed_vjp_zero_r(tiny_params, rng):
    assert np.array_equal(mixed_vjp(tiny_params, rng.normal(size=6), 0, np.zeros(tiny_params.n_params)), np.zeros(6))


def test_euler_identity(rng):
    p = init_params(InitScheme("standard", 4), [5, 6, 6, 3])
    x = rng.normal(size=5)
    # theta . grad Phi_j = L * Phi_j ; checked through the margin of every label
    for y in range(3):
        g = grad_theta_margin(p, x, y)
        assert np.isclose(p.flatten() @ g, 3 * margin(p, x, y), rtol=1e-12)


def test_factored_jacobian_operations_agree_with_dense(tiny_params, rng):
    X = rng.normal(size=(7, 6))
    y = rng.integers(0, 3, 7)
    jac = MarginJacobian(tiny_params, X, y)
    G = jac.flat_gradients()
    lam = rng.random(7)
    r = rng.normal(size=tiny_params.n_params)
    np.testing.assert_allclose(np.concatenate([c.ravel() for c in jac.combine(lam)]), G.T @ lam, rtol=1e-12)
    np.testing.assert_allclose(jac.project(tiny_params.unflatten(r)), G @ r, rtol=1e-12)
    np.testing.assert_allclose(jac.gram(), G @ G.T, rtol=1e-12)
    np.testing.assert_allclose(jac.margins, margin(tiny_params, X, y), rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_flatten_unflatten_round_trip(dims, seed):
    p = init_params(InitScheme("standard", seed), dims)
    theta = p.flatten()
    assert theta.size == p.n_params == sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    back = p.unflatten(theta)
    assert all(np.array_equal(u, v) for u, v in zip(back, p.layer_weights))
    assert np.array_equal(p.with_flat(theta).flatten(), theta)


def test_unflatten_rejects_wrong_length(tiny_params):
    with pytest.raises(ValueError):
        tiny_params.unflatten(np.zeros(tiny_params.n_params + 1))


def test_float32_precision():
    p = init_params(InitScheme("standard", 0), [4, 5, 2], precision=32)
    assert p.dtype == np.float32
    assert forward(p, np.ones(4)).dtype == np.float32
