import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn.cross import CrossParams, cross_backward, cross_forward, cross_layer_forward, cross_param_count
from dcn.tensor import ShapeError, make_rng
from gradcheck import numeric_grad, rel_error


def test_layer_residual_identity():
    xl = np.array([1.5, -2.0, 0.25])
    out = cross_layer_forward([1.0, 2.0, 3.0], xl, np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(out, xl)


def test_layer_scalar_example():
    np.testing.assert_allclose(cross_layer_forward([2.0], [3.0], [0.5], [1.0]), [7.0])


def test_layer_two_dim_example():
    np.testing.assert_allclose(cross_layer_forward([1, 2], [1, 2], [1, 0], [0, 0]), [2, 4])


def test_layer_matches_outer_product_form():
    rng = make_rng(0)
    x0, xl, w, b = rng.normal(size=(4, 6))
    explicit = np.outer(x0, xl) @ w + b + xl
    np.testing.assert_allclose(cross_layer_forward(x0, xl, w, b), explicit, rtol=1e-12, atol=1e-12)


def test_layer_shape_error():
    with pytest.raises(ShapeError):
        cross_layer_forward([1, 2], [1, 2], [1, 2, 3], [0, 0])


def test_forward_examples():
    x = np.array([0.3, -0.7])
    np.testing.assert_array_equal(cross_forward(CrossParams.zeros(2, 0), x).output, x)
    np.testing.assert_array_equal(cross_forward(CrossParams.zeros(2, 1), x).output, x)
    p = CrossParams([[1.0], [1.0]], [[0.0], [0.0]])
    acts = cross_forward(p, np.array([1.0]))
    # x1 = x^2 + x, x2 = x^3 + 2x^2 + x
    np.testing.assert_allclose(acts.xs[1], [2.0])
    np.testing.assert_allclose(acts.output, [4.0])


@given(st.integers(1, 8), st.integers(0, 4), st.integers(0, 2**31))
@settings(max_examples=30)
def test_zero_params_is_identity(d, depth, seed):
    x = make_rng(seed).normal(size=d)
    np.testing.assert_array_equal(cross_forward(CrossParams.zeros(d, depth), x).output, x)


def test_batched_forward_matches_rows():
    rng = make_rng(1)
    p = CrossParams.initialize(5, 3, rng)
    X = rng.normal(size=(4, 5))
    batch = cross_forward(p, X).output
    for i in range(4):
        np.testing.assert_allclose(batch[i], cross_forward(p, X[i]).output, rtol=1e-13)


def test_backward_zero_upstream():
    rng = make_rng(2)
    p = CrossParams.initialize(4, 2, rng)
    acts = cross_forward(p, rng.normal(size=4))
    g = cross_backward(acts, p, np.zeros(4))
    assert not g.x0.any() and not g.weights.any() and not g.biases.any()


def test_backward_scalar_example():
    p = CrossParams([[0.5]], [[1.0]])
    acts = cross_forward(p, np.array([2.0]))
    g = cross_backward(acts, p, np.array([1.0]))
    np.testing.assert_allclose(g.weights, [[4.0]])
    np.testing.assert_allclose(g.biases, [[1.0]])
    # d/dx0 of x0*x0*w + b + x0 = 2*x0*w + 1
    np.testing.assert_allclose(g.x0, [3.0])


def _fd_check(d, depth, seed, batch=None):
    rng = make_rng(seed)
    p = CrossParams(rng.uniform(-1, 1, (depth, d)), rng.uniform(-1, 1, (depth, d)))
    x0 = rng.uniform(-1, 1, (batch, d) if batch else d)
    u = rng.normal(size=x0.shape)

    def f():
        return float(np.sum(cross_forward(p, x0).output * u))

    g = cross_backward(cross_forward(p, x0), p, u)
    errs = [rel_error(g.weights, numeric_grad(f, p.weights)),
            rel_error(g.biases, numeric_grad(f, p.biases)),
            rel_error(g.x0, numeric_grad(f, x0))]
    return max(errs)


def test_backward_matches_finite_differences_d8_l3():
    assert _fd_check(8, 3, seed=7) < 1e-6


@pytest.mark.parametrize("d", [1, 3, 16])
@pytest.mark.parametrize("depth", [1, 2, 4])
def test_backward_fd_grid(d, depth):
    assert _fd_check(d, depth, seed=100 * d + depth) < 1e-6


def test_backward_fd_batched():
    assert _fd_check(6, 3, seed=11, batch=5) < 1e-6


def test_x0_gradient_accumulates_over_layers():
    # dropping the per-layer x0 terms would leave only the residual pass-through
    rng = make_rng(5)
    p = CrossParams.initialize(3, 3, rng)
    x0 = rng.normal(size=3)
    g = cross_backward(cross_forward(p, x0), p, np.ones(3))
    residual_only = cross_backward(cross_forward(p, x0), CrossParams.zeros(3, 3), np.ones(3)).x0
    assert not np.allclose(g.x0, residual_only)


def test_param_count():
    assert cross_param_count(1026, 6) == 12312
    assert cross_param_count(77, 0) == 0
    assert cross_param_count(3, 2) == 12
    assert CrossParams.zeros(3, 2).num_params() == 12


def test_activation_cache_sizes():
    p = CrossParams.initialize(4, 3, make_rng(0))
    acts = cross_forward(p, np.ones(4))
    assert len(acts.xs) == 4 and len(acts.s) == 3
    assert all(x.shape == (4,) for x in acts.xs)
