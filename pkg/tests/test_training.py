import json

import numpy as np
import pytest

from dcn.data import SyntheticSpec, generate_synthetic
from dcn.model import Gradients
from dcn.training import (
    AdamState,
    DatasetHandles,
    GridSpec,
    TrainConfig,
    adam_step,
    clip_gradients,
    grid_point_config,
    grid_run_seed,
    grid_search,
    train,
    write_grid_results,
    write_metrics,
)


def handles(poly="4*x1*x2", dim=2, n=4000, seed=0):
    d = generate_synthetic(SyntheticSpec(dim, poly, n, 1000, 1000, seed))
    return DatasetHandles(d.train, d.val, d.schema(), d.test)


@pytest.fixture(scope="module")
def product_data():
    return handles()


def test_clip_example():
    out = clip_gradients([np.array([30.0, 40.0])], 5.0)
    np.testing.assert_allclose(out[0], [3.0, 4.0], rtol=1e-15)


def test_clip_leaves_small_gradients():
    g = {"a": np.array([0.3, -0.4]), "b": np.array([[1.0]])}
    out = clip_gradients(g, 100.0)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_preserves_direction_and_bounds_norm():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = Gradients({"a": rng.normal(0, 50, (3, 4)), "b": rng.normal(0, 50, 5)})
        out = clip_gradients(g, 10.0)
        before = np.sqrt(sum(np.sum(v * v) for v in g.tensors.values()))
        after = np.sqrt(sum(np.sum(v * v) for v in out.tensors.values()))
        assert after <= min(before, 10.0) * (1 + 1e-12)
        ratio = out.tensors["a"] / g.tensors["a"]
        np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-12)


def test_clip_rejects_nonpositive():
    with pytest.raises(ValueError):
        clip_gradients([np.ones(2)], 0.0)


def test_adam_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState.zeros_like(p)
    adam_step(st, p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    st = AdamState.zeros_like(p)
    adam_step(st, p, {"w": np.array([3.0, -0.01, 1e3])}, lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 0.49], atol=1e-8)


def test_adam_constant_gradient_moves_lr_per_step():
    p = {"w": np.zeros(1)}
    st = AdamState.zeros_like(p)
    for _ in range(50):
        adam_step(st, p, {"w": np.array([0.7])}, lr=0.001)
    np.testing.assert_allclose(p["w"], [-0.05], rtol=1e-6)


def test_zero_steps_returns_initial_model(product_data):
    res = train(TrainConfig(max_steps=0, deep_sizes=[8]), product_data)
    assert res.history == []
    assert res.summary["steps_run"] == 0


def test_training_reduces_loss(product_data):
    cfg = TrainConfig(max_steps=400, eval_every=100, learning_rate=0.01, batch_size=128,
                      cross_layers=1, deep_sizes=[])
    res = train(cfg, product_data)
    steps = [h["step"] for h in res.history]
    assert steps == [0, 100, 200, 300, 400]
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"] - 0.05
    assert res.best_val_loss == min(h["val_loss"] for h in res.history)


def test_training_is_deterministic(product_data, tmp_path):
    cfg = TrainConfig(max_steps=150, eval_every=50, batch_size=64, deep_sizes=[8], batch_norm=True, seed=3)
    a, b = train(cfg, product_data), train(cfg, product_data)
    write_metrics(tmp_path / "a.jsonl", a)
    write_metrics(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k, v in a.params.named_tensors().items():
        np.testing.assert_array_equal(v, b.params.named_tensors()[k])
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["summary"] is True
    assert "wall_time" not in lines[0]


def test_best_params_reproduce_best_loss(product_data):
    from dcn.training import evaluate

    cfg = TrainConfig(max_steps=200, eval_every=25, batch_size=64, learning_rate=0.02, cross_layers=1, deep_sizes=[])
    res = train(cfg, product_data)
    assert evaluate(res.params, product_data.val)["logloss"] == res.best_val_loss


def test_early_stopping(product_data):
    cfg = TrainConfig(max_steps=100000, eval_every=10, batch_size=64, learning_rate=0.05,
                      early_stop_patience=3, cross_layers=1, deep_sizes=[])
    res = train(cfg, product_data)
    assert res.summary["steps_run"] < 100000
    after_best = [h for h in res.history if h["step"] > res.summary["best_step"]]
    assert len(after_best) == 3


def test_grid_run_seed_is_stable():
    assert grid_run_seed(0, 0) == grid_run_seed(0, 0)
    assert len({grid_run_seed(0, i) for i in range(100)}) == 100


def test_single_point_grid_matches_direct_training(product_data):
    grid = GridSpec([1], [8], [1], [0.01])
    template = TrainConfig(max_steps=60, eval_every=20, batch_size=64, seed=7)
    rows = grid_search(grid, template, product_data, workers=1)
    direct = train(grid_point_config(template, grid.points()[0], 0), product_data)
    assert rows[0]["best_val_loss"] == direct.best_val_loss
    assert rows[0]["seed"] == grid_run_seed(7, 0)


def test_grid_ranks_cross_above_linear(product_data, tmp_path):
    grid = GridSpec([0], [8], [0, 1], [0.02])
    template = TrainConfig(max_steps=600, eval_every=100, batch_size=128)
    rows = grid_search(grid, template, product_data, workers=1)
    assert [r["cross_layers"] for r in rows] == [1, 0]
    assert rows[0]["best_val_loss"] < rows[1]["best_val_loss"] - 0.03
    write_grid_results(tmp_path / "g.tsv", rows)
    lines = (tmp_path / "g.tsv").read_text().splitlines()
    assert lines[0].startswith("index\t") and len(lines) == 3


def test_grid_records_failures(product_data):
    grid = GridSpec([1], [0, 4], [1], [0.01])
    rows = grid_search(grid, TrainConfig(max_steps=10, eval_every=5, batch_size=32), product_data, workers=1)
    assert rows[0]["error"] is None
    assert rows[-1]["best_val_loss"] is None and rows[-1]["error"]


def test_grid_parallel_matches_serial(product_data):
    grid = GridSpec([1], [4], [0, 1], [0.01])
    template = TrainConfig(max_steps=20, eval_every=10, batch_size=32)
    assert grid_search(grid, template, product_data, workers=2) == grid_search(grid, template, product_data, workers=1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        GridSpec(cross_layers=[])
