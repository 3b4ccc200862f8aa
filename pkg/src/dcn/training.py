"""Mini-batch Adam training with gradient clipping, early stopping and grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cross import cross_param_count
from .data import Dataset, DatasetSchema
from .deep import deep_param_count
from .model import (
    Gradients,
    ModelConfig,
    ModelParams,
    accuracy,
    logloss,
    model_backward,
    model_forward,
)
from .tensor import ShapeError, derive_rng, global_norm

log = logging.getLogger(__name__)

WORKERS_ENV = "DCN_WORKERS"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 100.0
    lam: float = 0.0
    max_steps: int = 1000
    eval_every: int = 100
    early_stop_patience: int = 0  # evaluations without improvement; 0 disables
    seed: int = 0
    cross_layers: int = 2
    deep_sizes: list[int] = field(default_factory=lambda: [64, 64])
    batch_norm: bool = False
    dnn_concat_x0: bool = False
    logits_bias: bool = False
    train_eval_rows: int = 20000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.deep_sizes = [int(n) for n in self.deep_sizes]

    def model_config(self, schema: DatasetSchema) -> ModelConfig:
        return ModelConfig(
            fields=schema.fields,
            dense_count=schema.dense_count,
            cross_layers=self.cross_layers,
            deep_sizes=self.deep_sizes,
            n_classes=schema.n_classes,
            batch_norm=self.batch_norm,
            logits_bias=self.logits_bias,
            dnn_concat_x0=self.dnn_concat_x0,
        )


@dataclass
class DatasetHandles:
    train: Dataset
    val: Dataset
    schema: DatasetSchema
    test: Dataset | None = None

    def __post_init__(self):
        if len(self.train) == 0 or len(self.val) == 0:
            raise ValueError("training and validation sets must be non-empty")


# ---------------------------------------------------------------- optimizer


def _arrays(g) -> list[np.ndarray]:
    if isinstance(g, Gradients):
        return list(g.values())
    if isinstance(g, dict):
        return list(g.values())
    return [np.asarray(a) for a in g]


def clip_gradients(g, clip_norm: float):
    """Rescale so the global L2 norm is at most ``clip_norm``. Returns a new object of the same kind."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(_arrays(g))
    scale = clip_norm / norm if norm > clip_norm else 1.0
    if isinstance(g, Gradients):
        return Gradients({k: v * scale for k, v in g.items()})
    if isinstance(g, dict):
        return {k: np.asarray(v) * scale for k, v in g.items()}
    return [np.asarray(a) * scale for a in g]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()}, {k: np.zeros_like(a) for k, a in tensors.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` arrays in place."""
    gd = grads.tensors if isinstance(grads, Gradients) else grads
    if gd.keys() != params.keys():
        raise ShapeError("gradient names do not match parameter names")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = gd[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- training loop


def evaluate(params: ModelParams, data: Dataset, chunk: int = 8192) -> dict[str, float]:
    """Eval-mode logloss (no penalty term) and accuracy over a whole dataset."""
    probs = [model_forward(params, b, "eval")[0] for b in data.batches(chunk)]
    p = np.concatenate(probs, axis=0)
    return {"logloss": logloss(p, data.labels), "accuracy": accuracy(p, data.labels)}


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    summary: dict
    timings: list[dict] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return self.summary["best_val_loss"]


def _param_summary(params: ModelParams) -> dict:
    cfg = params.config
    sizes = cfg.deep_sizes
    equal = len(set(sizes)) == 1
    counts = params.param_counts()
    return {
        "cross_param_count": cross_param_count(cfg.input_dim, cfg.cross_layers),
        "deep_param_count": deep_param_count(cfg.input_dim, sizes[0], len(sizes)) if equal else None,
        "model_param_counts": counts,
    }


def train(config: TrainConfig, data: DatasetHandles, log_every: int = 0) -> TrainResult:
    """Train from scratch and return the parameters with the lowest validation logloss.

    Validation runs at step 0 and every ``eval_every`` steps (and at the
    final step). Training stops at ``max_steps`` or after
    ``early_stop_patience`` evaluations without improvement.
    """
    model_cfg = config.model_config(data.schema)
    params = ModelParams.initialize(model_cfg, config.seed)
    if config.max_steps == 0:
        summary = {"summary": True, "best_val_loss": None, "best_step": None, "steps_run": 0,
                   **_param_summary(params)}
        return TrainResult(params, [], summary)

    tensors = params.named_tensors()
    adam = AdamState.zeros_like(tensors)
    shuffle_rng = derive_rng(config.seed, 1000)
    train_ds = data.train
    n = len(train_ds)
    train_probe = train_ds.take(slice(0, min(n, config.train_eval_rows)))

    history: list[dict] = []
    timings: list[dict] = []
    start = time.perf_counter()
    best_loss = math.inf
    best_params = params.copy()
    best_step = 0
    stale = 0
    perm = shuffle_rng.permutation(n)
    pos = 0
    batch_id = 0
    step = 0

    def record(step: int) -> bool:
        nonlocal best_loss, best_params, best_step, stale
        tr = evaluate(params, train_probe)
        va = evaluate(params, data.val)
        if not math.isfinite(va["logloss"]):
            raise TrainingDivergedError(f"non-finite validation loss at step {step}")
        rec = {"step": step, "train_loss": tr["logloss"], "val_loss": va["logloss"], "val_accuracy": va["accuracy"]}
        history.append(rec)
        timings.append({"step": step, "wall_time": time.perf_counter() - start})
        if log_every and (len(history) - 1) % log_every == 0:
            log.info("step %d train %.5f val %.5f", step, rec["train_loss"], rec["val_loss"])
        if va["logloss"] < best_loss:
            best_loss = va["logloss"]
            best_params = params.copy()
            best_step = step
            stale = 0
        else:
            stale += 1
        return bool(config.early_stop_patience) and stale >= config.early_stop_patience

    stop = record(0)
    while not stop and step < config.max_steps:
        if pos >= n:
            perm = shuffle_rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + config.batch_size]
        pos += config.batch_size
        batch = train_ds.take(idx)
        probs, cache = model_forward(params, batch, "train")
        loss = logloss(probs, batch.labels, params, config.lam)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite training loss {loss} at step {step + 1} (batch {batch_id}, lr {config.learning_rate})"
            )
        grads = model_backward(cache, params, batch.labels, config.lam)
        grads = clip_gradients(grads, config.clip_norm)
        adam_step(adam, tensors, grads, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        step += 1
        batch_id += 1
        if step % config.eval_every == 0 or step == config.max_steps:
            stop = record(step)

    summary = {
        "summary": True,
        "best_val_loss": best_loss,
        "best_step": best_step,
        "steps_run": step,
        **_param_summary(best_params),
    }
    return TrainResult(best_params, history, summary, timings)


def write_metrics(path: str | Path, result: TrainResult) -> None:
    """One JSON record per evaluation, then the summary record."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in result.history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(json.dumps(result.summary, sort_keys=True) + "\n")


def write_timings(path: str | Path, result: TrainResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in result.timings:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- grid search


@dataclass
class GridSpec:
    hidden_layers: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    hidden_sizes: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    cross_layers: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    learning_rates: list[float] = field(default_factory=lambda: [round(0.0001 * k, 4) for k in range(1, 11)])

    def __post_init__(self):
        for name in ("hidden_layers", "hidden_sizes", "cross_layers", "learning_rates"):
            if not getattr(self, name):
                raise ValueError(f"grid list {name!r} is empty")

    def points(self) -> list[dict]:
        return [
            {"hidden_layers": h, "hidden_size": s, "cross_layers": c, "learning_rate": lr}
            for h, s, c, lr in itertools.product(self.hidden_layers, self.hidden_sizes,
                                                  self.cross_layers, self.learning_rates)
        ]


def grid_run_seed(seed: int, index: int) -> int:
    """Seed used for grid combination ``index``."""
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def grid_point_config(template: TrainConfig, point: dict, index: int) -> TrainConfig:
    return replace(
        template,
        deep_sizes=[point["hidden_size"]] * point["hidden_layers"],
        cross_layers=point["cross_layers"],
        learning_rate=point["learning_rate"],
        seed=grid_run_seed(template.seed, index),
    )


def _run_point(args) -> dict:
    index, point, template, data = args
    cfg = grid_point_config(template, point, index)
    row = {"index": index, **point, "seed": cfg.seed}
    try:
        res = train(cfg, data)
        row.update(
            best_val_loss=res.best_val_loss,
            best_step=res.summary["best_step"],
            steps_run=res.summary["steps_run"],
            param_count=res.summary["model_param_counts"]["network"],
            error=None,
        )
    except Exception as e:  # a failed combination must not end the search
        log.warning("grid point %d failed: %s", index, e)
        row.update(best_val_loss=None, best_step=None, steps_run=None, param_count=None, error=str(e))
    return row


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def grid_search(grid: GridSpec, template: TrainConfig, data: DatasetHandles,
                workers: int | None = None) -> list[dict]:
    """Train every grid combination; rows sorted by best validation logloss, failures last."""
    jobs = [(i, p, template, data) for i, p in enumerate(grid.points())]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(j) for j in jobs]
    return sorted(rows, key=lambda r: (r["best_val_loss"] is None, r["best_val_loss"] or 0.0, r["index"]))


def write_grid_results(path: str | Path, rows: Sequence[dict]) -> None:
    cols = ["index", "hidden_layers", "hidden_size", "cross_layers", "learning_rate", "seed",
            "best_val_loss", "best_step", "steps_run", "param_count", "error"]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join("" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in cols) + "\n")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
