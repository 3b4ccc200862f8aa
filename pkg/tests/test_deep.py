import numpy as np
import pytest

from dcn.deep import BatchNormState, DeepParams, deep_backward, deep_forward, deep_layer_forward, deep_param_count
from dcn.tensor import ShapeError, make_rng
from gradcheck import numeric_grad, rel_error


def test_layer_examples():
    np.testing.assert_array_equal(deep_layer_forward(np.eye(2), [0, 0], [1, -1]), [1, 0])
    np.testing.assert_array_equal(deep_layer_forward([[1, 1]], [-3], [1, 1]), [0])
    np.testing.assert_array_equal(deep_layer_forward([[1, 1]], [2], [0, 0]), [2])
    with pytest.raises(ShapeError):
        deep_layer_forward(np.eye(2), [0, 0], [1, 2, 3])


def test_relu_idempotent_on_nonnegative():
    h = np.abs(make_rng(0).normal(size=5))
    once = deep_layer_forward(np.eye(5), np.zeros(5), h)
    np.testing.assert_array_equal(deep_layer_forward(np.eye(5), np.zeros(5), once), once)


def test_forward_examples():
    x = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(deep_forward(DeepParams([], []), x).output, x)
    p = DeepParams([np.eye(3)], [np.zeros(3)])
    np.testing.assert_array_equal(deep_forward(p, x).output, np.maximum(x, 0))


def test_forward_matches_step_by_step_evaluation():
    rng = make_rng(1)
    p = DeepParams.initialize(4, [5, 3], rng)
    p.biases = [rng.normal(size=5), rng.normal(size=3)]
    x = rng.normal(size=4)
    h1 = [max(0.0, sum(p.weights[0][i, j] * x[j] for j in range(4)) + p.biases[0][i]) for i in range(5)]
    h2 = [max(0.0, sum(p.weights[1][i, j] * h1[j] for j in range(5)) + p.biases[1][i]) for i in range(3)]
    np.testing.assert_allclose(deep_forward(p, x).output[0], h2, rtol=1e-12, atol=1e-14)


def test_backward_zero_upstream():
    rng = make_rng(2)
    p = DeepParams.initialize(3, [4], rng)
    acts = deep_forward(p, rng.normal(size=(2, 3)))
    g = deep_backward(acts, p, np.zeros((2, 4)))
    assert not g.x0.any() and not g.weights[0].any() and not g.biases[0].any()


def test_dead_relu_layer_has_zero_weight_gradient():
    p = DeepParams([np.ones((2, 2))], [np.array([-10.0, -10.0])])
    acts = deep_forward(p, np.array([[1.0, 1.0], [0.5, 0.2]]))
    g = deep_backward(acts, p, np.ones((2, 2)))
    assert not g.weights[0].any()


def _fd_deep(batch_norm: bool, seed: int, mode: str = "train"):
    rng = make_rng(seed)
    p = DeepParams.initialize(8, [16, 16], rng, batch_norm=batch_norm)
    p.biases = [rng.normal(scale=0.1, size=16) for _ in range(2)]
    if batch_norm:
        p.bn.gamma = [rng.uniform(0.5, 1.5, 16) for _ in range(2)]
        p.bn.beta = [rng.normal(scale=0.3, size=16) for _ in range(2)]
        p.bn.running_mean = [rng.normal(size=16) for _ in range(2)]
        p.bn.running_var = [rng.uniform(0.5, 2, 16) for _ in range(2)]
    x = rng.normal(size=(6, 8))
    u = rng.normal(size=(6, 16))

    def f():
        return float(np.sum(deep_forward(p, x, mode).output * u))

    g = deep_backward(deep_forward(p, x, mode), p, u)
    errs = {"x0": rel_error(g.x0, numeric_grad(f, x))}
    for l in range(2):
        errs[f"W{l}"] = rel_error(g.weights[l], numeric_grad(f, p.weights[l]))
        gb_num = numeric_grad(f, p.biases[l])
        if batch_norm and mode == "train":
            # the batch mean cancels any bias before normalization: both sides are ~0
            errs[f"b{l}"] = float(max(np.abs(g.biases[l]).max(), np.abs(gb_num).max()))
        else:
            errs[f"b{l}"] = rel_error(g.biases[l], gb_num)
        if batch_norm:
            errs[f"gamma{l}"] = rel_error(g.gamma[l], numeric_grad(f, p.bn.gamma[l]))
            errs[f"beta{l}"] = rel_error(g.beta[l], numeric_grad(f, p.bn.beta[l]))
    return errs


def test_backward_fd_without_batch_norm():
    errs = _fd_deep(False, seed=3)
    assert max(errs.values()) < 1e-6, errs


def test_backward_fd_with_batch_norm_train_mode():
    errs = _fd_deep(True, seed=4)
    assert max(errs.values()) < 1e-6, errs


def test_backward_fd_with_batch_norm_eval_mode():
    errs = _fd_deep(True, seed=5, mode="eval")
    assert max(errs.values()) < 1e-6, errs


def test_batch_norm_normalizes_batch():
    rng = make_rng(6)
    p = DeepParams.initialize(5, [7], rng, batch_norm=True)
    x = rng.normal(loc=3.0, scale=2.0, size=(9, 5))
    acts = deep_forward(p, x, "train")
    xhat = acts.xhat[0]
    np.testing.assert_allclose(xhat.mean(axis=0), 0.0, atol=1e-8)
    # eps in the denominator keeps the variance just below 1
    var = xhat.var(axis=0)
    z_var = (x @ p.weights[0].T).var(axis=0)
    np.testing.assert_allclose(var, z_var / (z_var + p.bn.eps), atol=1e-8)
    np.testing.assert_allclose(var, 1.0, atol=1e-3)


def test_batch_norm_running_stats_update_only_in_train_mode():
    rng = make_rng(7)
    p = DeepParams.initialize(3, [4], rng, batch_norm=True)
    x = rng.normal(size=(5, 3))
    deep_forward(p, x, "eval")
    np.testing.assert_array_equal(p.bn.running_mean[0], 0.0)
    deep_forward(p, x, "train")
    z = x @ p.weights[0].T
    np.testing.assert_allclose(p.bn.running_mean[0], 0.01 * z.mean(axis=0))
    np.testing.assert_allclose(p.bn.running_var[0], 0.99 + 0.01 * z.var(axis=0))


def test_batch_norm_state_validation():
    with pytest.raises(ValueError):
        BatchNormState.for_sizes([3], eps=0.0)


def test_param_count_formula():
    assert deep_param_count(1026, 1024, 2) == 2_101_248
    assert deep_param_count(1, 1, 1) == 2
    assert deep_param_count(5, 3, 1) == 18
    assert deep_param_count(5, 3, 0) == 0


def test_param_count_matches_initialized_network():
    p = DeepParams.initialize(10, [6, 6, 6], make_rng(0))
    assert p.num_params() == deep_param_count(10, 6, 3)
