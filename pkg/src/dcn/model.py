"""Full model: embeddings -> (cross || deep) -> logits.

The combination layer concatenates the cross output and the deep output and
applies a single logits layer. With ``cross_layers == 0`` the model is the
DNN baseline; by default its logits see only the deep output, and
``dnn_concat_x0=True`` makes them see ``[x0, h]`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cross import CrossActivations, CrossParams, cross_backward, cross_forward, cross_param_count
from .deep import DeepActivations, DeepParams, deep_backward, deep_forward
from .embedding import EmbeddingTable, FieldSpec, embed_backward_batch, embed_lookup_batch, stack_batch
from .tensor import DTYPE, ShapeError, derive_rng, uniform

P_CLAMP = 1e-15


class SchemaError(ValueError):
    """A batch does not match the model's input layout."""


class UsageError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    fields: list[FieldSpec]
    dense_count: int
    cross_layers: int = 2
    deep_sizes: list[int] = field(default_factory=lambda: [64, 64])
    n_classes: int = 2
    batch_norm: bool = False
    logits_bias: bool = False
    dnn_concat_x0: bool = False
    softmax_binary: bool = False

    def __post_init__(self):
        self.fields = [f if isinstance(f, FieldSpec) else FieldSpec(**f) for f in self.fields]
        self.deep_sizes = [int(n) for n in self.deep_sizes]
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.cross_layers < 0:
            raise ValueError("cross_layers must be >= 0")
        if any(n < 1 for n in self.deep_sizes):
            raise ValueError("deep layer sizes must be >= 1")
        if self.input_dim <= 0:
            raise ValueError("model input dimension must be positive")
        if not self.include_cross and not self.include_deep:
            raise ValueError("model has neither a cross nor a deep branch")

    @property
    def input_dim(self) -> int:
        return sum(f.embed_dim for f in self.fields) + self.dense_count

    @property
    def include_cross(self) -> bool:
        # with no deep tower the cross branch (possibly zero layers) is the only path
        return self.cross_layers > 0 or self.dnn_concat_x0 or not self.deep_sizes

    @property
    def include_deep(self) -> bool:
        return bool(self.deep_sizes)

    @property
    def logits_in_dim(self) -> int:
        n = self.input_dim if self.include_cross else 0
        return n + (self.deep_sizes[-1] if self.include_deep else 0)

    @property
    def n_outputs(self) -> int:
        return 1 if self.n_classes == 2 and not self.softmax_binary else self.n_classes

    def to_dict(self) -> dict:
        return {
            "fields": [
                {"field_id": f.field_id, "vocab_size": f.vocab_size, "embed_dim": f.embed_dim} for f in self.fields
            ],
            "dense_count": self.dense_count,
            "cross_layers": self.cross_layers,
            "deep_sizes": list(self.deep_sizes),
            "n_classes": self.n_classes,
            "batch_norm": self.batch_norm,
            "logits_bias": self.logits_bias,
            "dnn_concat_x0": self.dnn_concat_x0,
            "softmax_binary": self.softmax_binary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """All trainable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, embedding: EmbeddingTable, cross: CrossParams,
                 deep: DeepParams, logits_w: np.ndarray, logits_b: np.ndarray | None = None):
        self.config = config
        self.embedding = embedding
        self.cross = cross
        self.deep = deep
        self.logits_w = np.asarray(logits_w, dtype=DTYPE)
        self.logits_b = None if logits_b is None else np.asarray(logits_b, dtype=DTYPE)
        expected = (config.n_outputs, config.logits_in_dim)
        if self.logits_w.shape != expected:
            raise ShapeError(f"logits weight shape {self.logits_w.shape} != {expected}")
        if config.logits_bias != (self.logits_b is not None):
            raise ShapeError("logits bias presence disagrees with config")
        if cross.depth and cross.dim != config.input_dim:
            raise ShapeError(f"cross dim {cross.dim} != stacked input dim {config.input_dim}")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        # separate streams so changing one branch does not reshuffle the others
        emb = EmbeddingTable.initialize(config.fields, derive_rng(seed, 0))
        cross = CrossParams.initialize(config.input_dim, config.cross_layers, derive_rng(seed, 1))
        deep = DeepParams.initialize(config.input_dim, config.deep_sizes, derive_rng(seed, 2), config.batch_norm)
        n_in = config.logits_in_dim
        logits_w = uniform(derive_rng(seed, 3), 1.0 / np.sqrt(n_in), (config.n_outputs, n_in))
        logits_b = np.zeros(config.n_outputs) if config.logits_bias else None
        return cls(config, emb, cross, deep, logits_w, logits_b)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in a fixed order; the arrays are live views."""
        out: dict[str, np.ndarray] = {}
        for i, m in enumerate(self.embedding.matrices):
            out[f"embedding.{i}"] = m
        if self.cross.depth:
            out["cross.w"] = self.cross.weights
            out["cross.b"] = self.cross.biases
        for l, (W, b) in enumerate(zip(self.deep.weights, self.deep.biases)):
            out[f"deep.W.{l}"] = W
            out[f"deep.b.{l}"] = b
        if self.deep.bn is not None:
            for l, (g, be) in enumerate(zip(self.deep.bn.gamma, self.deep.bn.beta)):
                out[f"bn.gamma.{l}"] = g
                out[f"bn.beta.{l}"] = be
        out["logits.w"] = self.logits_w
        if self.logits_b is not None:
            out["logits.b"] = self.logits_b
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        out = {}
        if self.deep.bn is not None:
            for l, (m, v) in enumerate(zip(self.deep.bn.running_mean, self.deep.bn.running_var)):
                out[f"bn.running_mean.{l}"] = m
                out[f"bn.running_var.{l}"] = v
        return out

    def regularized(self) -> list[str]:
        """Names covered by the L2 penalty: weights only, no biases or embeddings."""
        return [n for n in self.named_tensors() if n in ("cross.w", "logits.w") or n.startswith("deep.W.")]

    def copy(self) -> "ModelParams":
        c = self.config
        bn = None
        if self.deep.bn is not None:
            s = self.deep.bn
            bn = type(s)([g.copy() for g in s.gamma], [b.copy() for b in s.beta],
                         [m.copy() for m in s.running_mean], [v.copy() for v in s.running_var],
                         s.momentum, s.eps)
        return ModelParams(
            c,
            EmbeddingTable(c.fields, [m.copy() for m in self.embedding.matrices]),
            CrossParams(self.cross.weights.copy(), self.cross.biases.copy()),
            DeepParams([w.copy() for w in self.deep.weights], [b.copy() for b in self.deep.biases], bn),
            self.logits_w.copy(),
            None if self.logits_b is None else self.logits_b.copy(),
        )

    def param_counts(self) -> dict[str, int]:
        c = self.config
        counts = {
            "embedding": sum(m.size for m in self.embedding.matrices),
            "cross": cross_param_count(c.input_dim, self.cross.depth),
            "deep": self.deep.num_params(),
            "logits": self.logits_w.size + (0 if self.logits_b is None else self.logits_b.size),
        }
        counts["network"] = counts["cross"] + counts["deep"] + counts["logits"]
        counts["total"] = counts["network"] + counts["embedding"]
        return counts


class Gradients:
    """Gradient for every tensor of ``ModelParams.named_tensors()``, same names and shapes."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls({k: np.zeros_like(v) for k, v in params.named_tensors().items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()


@dataclass
class ForwardCache:
    ids: list[np.ndarray]
    x0: np.ndarray
    cross: CrossActivations | None
    deep: DeepActivations | None
    logits_in: np.ndarray
    probs: np.ndarray
    mode: str


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = np.asarray(z, dtype=DTYPE)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def stacked_input(params: ModelParams, dense, cat) -> tuple[np.ndarray, list[np.ndarray]]:
    cfg = params.config
    dense = np.asarray(dense, dtype=DTYPE)
    cat = np.asarray(cat, dtype=np.int64)
    if dense.ndim != 2 or dense.shape[1] != cfg.dense_count:
        raise SchemaError(f"batch has dense shape {dense.shape}, model expects {cfg.dense_count} dense features")
    if cat.ndim != 2 or cat.shape[1] != len(cfg.fields) or cat.shape[0] != dense.shape[0]:
        raise SchemaError(f"batch has categorical shape {cat.shape}, model expects {len(cfg.fields)} fields")
    ids = [params.embedding.route(i, cat[:, i]) for i in range(len(cfg.fields))]
    embeds = [embed_lookup_batch(params.embedding, i, ids[i]) for i in range(len(cfg.fields))]
    x0 = stack_batch(embeds, dense)
    if x0.shape[1] != cfg.input_dim:
        raise SchemaError(f"stacked input width {x0.shape[1]} != {cfg.input_dim}")
    return x0, ids


def model_forward(params: ModelParams, batch, mode: str = "train") -> tuple[np.ndarray, ForwardCache]:
    """Return probabilities and the cache needed by ``model_backward``.

    Binary models return a ``(batch,)`` array of P(y=1); softmax heads return
    ``(batch, n_classes)``.
    """
    cfg = params.config
    x0, ids = stacked_input(params, batch.dense, batch.cat)
    parts = []
    cross_acts = deep_acts = None
    if cfg.include_cross:
        cross_acts = cross_forward(params.cross, x0)
        parts.append(cross_acts.output)
    if cfg.include_deep:
        deep_acts = deep_forward(params.deep, x0, mode)
        parts.append(deep_acts.output)
    logits_in = np.concatenate(parts, axis=1)
    z = logits_in @ params.logits_w.T
    if params.logits_b is not None:
        z = z + params.logits_b
    probs = sigmoid(z[:, 0]) if cfg.n_outputs == 1 else softmax(z)
    return probs, ForwardCache(ids, x0, cross_acts, deep_acts, logits_in, probs, mode)


def predict(params: ModelParams, batch) -> np.ndarray:
    return model_forward(params, batch, mode="eval")[0]


def l2_penalty(params: ModelParams) -> float:
    tensors = params.named_tensors()
    return float(sum(np.sum(tensors[n] ** 2) for n in params.regularized()))


def logloss(p, y, params: ModelParams | None = None, lam: float = 0.0) -> float:
    """Mean negative log-likelihood plus ``lam`` times the squared L2 norm of the weights.

    ``p`` is a vector of P(y=1) for binary labels or a ``(N, K)`` matrix of
    class probabilities. Probabilities are clamped to ``[1e-15, 1 - 1e-15]``.
    """
    p = np.asarray(p, dtype=DTYPE)
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("logloss of an empty batch is undefined")
    if p.ndim == 1:
        p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
        loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    else:
        py = np.clip(p[np.arange(len(y)), y.astype(np.int64)], P_CLAMP, 1 - P_CLAMP)
        loss = -np.mean(np.log(py))
    if lam and params is not None:
        loss += lam * l2_penalty(params)
    return float(loss)


def accuracy(p, y) -> float:
    p = np.asarray(p)
    y = np.asarray(y)
    pred = (p >= 0.5).astype(np.int64) if p.ndim == 1 else np.argmax(p, axis=1)
    return float(np.mean(pred == y))


def model_backward(cache: ForwardCache | None, params: ModelParams, y, lam: float = 0.0) -> Gradients:
    if cache is None:
        raise UsageError("model_backward needs the cache from model_forward")
    cfg = params.config
    y = np.asarray(y)
    n = y.shape[0]
    p = cache.probs
    if cfg.n_outputs == 1:
        dz = ((p - y) / n)[:, None]
    else:
        onehot = np.zeros_like(p)
        onehot[np.arange(n), y.astype(np.int64)] = 1.0
        dz = (p - onehot) / n

    grads = Gradients.zeros_like(params)
    t = grads.tensors
    t["logits.w"][...] = dz.T @ cache.logits_in
    if params.logits_b is not None:
        t["logits.b"][...] = dz.sum(axis=0)
    d_in = dz @ params.logits_w

    gx0 = np.zeros_like(cache.x0)
    d = cfg.input_dim
    offset = 0
    if cfg.include_cross:
        g_cross = d_in[:, :d]
        offset = d
        if params.cross.depth:
            cg = cross_backward(cache.cross, params.cross, g_cross)
            t["cross.w"][...] = cg.weights
            t["cross.b"][...] = cg.biases
            gx0 += cg.x0
        else:
            gx0 += g_cross
    if cfg.include_deep:
        dg = deep_backward(cache.deep, params.deep, d_in[:, offset:])
        for l in range(params.deep.depth):
            t[f"deep.W.{l}"][...] = dg.weights[l]
            t[f"deep.b.{l}"][...] = dg.biases[l]
            if dg.gamma is not None:
                t[f"bn.gamma.{l}"][...] = dg.gamma[l]
                t[f"bn.beta.{l}"][...] = dg.beta[l]
        gx0 += dg.x0

    # both branches have been summed into gx0; now scatter it to embedding columns
    start = 0
    for i, f in enumerate(cfg.fields):
        sl = gx0[:, start:start + f.embed_dim]
        colgrad = embed_backward_batch(sl, cache.ids[i])
        t[f"embedding.{i}"][:, colgrad.ids] += colgrad.columns
        start += f.embed_dim

    if lam:
        tensors = params.named_tensors()
        for name in params.regularized():
            t[name] += 2.0 * lam * tensors[name]
    return grads


def objective(params: ModelParams, batch, lam: float = 0.0, mode: str = "train") -> float:
    p, _ = model_forward(params, batch, mode)
    return logloss(p, batch.labels, params, lam)


def perfect_cross_model(config: ModelConfig, cross_w: Sequence, logits_w: Sequence,
                        cross_b: Sequence | None = None) -> ModelParams:
    """Cross-only model with hand-set weights (no embeddings, no deep tower)."""
    if config.fields or config.deep_sizes:
        raise ValueError("hand-set cross model takes dense inputs only and no deep tower")
    w = np.atleast_2d(np.asarray(cross_w, dtype=DTYPE))
    b = np.zeros_like(w) if cross_b is None else np.atleast_2d(np.asarray(cross_b, dtype=DTYPE))
    return ModelParams(config, EmbeddingTable([]), CrossParams(w, b), DeepParams([], []),
                       np.atleast_2d(np.asarray(logits_w, dtype=DTYPE)),
                       np.zeros(config.n_outputs) if config.logits_bias else None)
