"""Fully-connected ReLU tower with optional batch normalization.

Batch normalization, when enabled, sits between the affine map and the ReLU:
``h_{l+1} = relu(gamma * (z - mean) / sqrt(var + eps) + beta)`` with
``z = W h_l + b``. Batches are 2-d arrays, one example per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, as_vector, uniform

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


@dataclass
class BatchNormState:
    gamma: list[np.ndarray]
    beta: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch norm epsilon must be positive")

    @classmethod
    def for_sizes(cls, sizes: Sequence[int], momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        return cls(
            gamma=[np.ones(n) for n in sizes],
            beta=[np.zeros(n) for n in sizes],
            running_mean=[np.zeros(n) for n in sizes],
            running_var=[np.ones(n) for n in sizes],
            momentum=momentum,
            eps=eps,
        )


@dataclass
class DeepParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn: BatchNormState | None = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=DTYPE) for w in self.weights]
        self.biases = [np.asarray(b, dtype=DTYPE) for b in self.biases]
        if len(self.weights) != len(self.biases):
            raise ShapeError("deep network needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"deep layer {i}: W {w.shape} incompatible with b {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"deep layer {i}: input width {w.shape[1]} != previous output")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    @property
    def out_dim(self) -> int | None:
        return self.weights[-1].shape[0] if self.weights else None

    @classmethod
    def initialize(cls, in_dim: int, sizes: Sequence[int], rng: np.random.Generator, batch_norm: bool = False):
        weights, biases = [], []
        n_in = in_dim
        for n_out in sizes:
            # He-scaled uniform: variance 2 / fan_in
            weights.append(uniform(rng, math.sqrt(6.0 / n_in), (n_out, n_in)))
            biases.append(np.zeros(n_out))
            n_in = n_out
        bn = BatchNormState.for_sizes(sizes) if batch_norm else None
        return cls(weights, biases, bn)

    def num_params(self) -> int:
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        if self.bn is not None:
            n += sum(g.size + b.size for g, b in zip(self.bn.gamma, self.bn.beta))
        return n


def relu(z):
    return np.maximum(z, 0.0)


def deep_layer_forward(W, b, h) -> np.ndarray:
    W = np.asarray(W, dtype=DTYPE)
    b = as_vector(b)
    h = np.asarray(h, dtype=DTYPE)
    if W.ndim != 2 or W.shape[1] != h.shape[-1] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"deep layer: W {W.shape}, b {b.shape}, h {h.shape}")
    return relu(h @ W.T + b)


@dataclass
class DeepActivations:
    hs: list[np.ndarray]
    pre: list[np.ndarray] = field(default_factory=list)  # input to the ReLU
    xhat: list[np.ndarray] = field(default_factory=list)  # normalized z (train-mode BN only)
    inv_std: list[np.ndarray] = field(default_factory=list)
    mode: str = "train"

    @property
    def output(self) -> np.ndarray:
        return self.hs[-1]


def deep_forward(params: DeepParams, x0, mode: str = "train") -> DeepActivations:
    """Run the tower on a batch ``x0`` of shape ``(batch, in_dim)``.

    In train mode batch norm normalizes with the batch statistics and updates
    the running averages in ``params.bn``; in eval mode it uses the running
    averages and leaves them untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = np.asarray(x0, dtype=DTYPE)
    if h.ndim == 1:
        h = h[None, :]
    if params.depth and h.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input width {h.shape[1]} != deep input width {params.weights[0].shape[1]}")
    acts = DeepActivations([h], mode=mode)
    bn = params.bn
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        if bn is not None:
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + bn.eps)
                xhat = (z - mean) * inv_std
                bn.running_mean[l] = bn.momentum * bn.running_mean[l] + (1 - bn.momentum) * mean
                bn.running_var[l] = bn.momentum * bn.running_var[l] + (1 - bn.momentum) * var
            else:
                inv_std = 1.0 / np.sqrt(bn.running_var[l] + bn.eps)
                xhat = (z - bn.running_mean[l]) * inv_std
            acts.xhat.append(xhat)
            acts.inv_std.append(inv_std)
            z = bn.gamma[l] * xhat + bn.beta[l]
        acts.pre.append(z)
        h = relu(z)
        acts.hs.append(h)
    return acts


@dataclass
class DeepGradients:
    x0: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gamma: list[np.ndarray] | None = None
    beta: list[np.ndarray] | None = None


def deep_backward(acts: DeepActivations, params: DeepParams, grad_out) -> DeepGradients:
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != acts.output.shape:
        raise ShapeError(f"grad_out {g.shape} does not match deep output {acts.output.shape}")
    bn = params.bn
    n = g.shape[0]
    gW = [None] * params.depth
    gb = [None] * params.depth
    ggamma = [None] * params.depth if bn is not None else None
    gbeta = [None] * params.depth if bn is not None else None
    for l in range(params.depth - 1, -1, -1):
        dz = g * (acts.pre[l] > 0)
        if bn is not None:
            xhat = acts.xhat[l]
            ggamma[l] = np.sum(dz * xhat, axis=0)
            gbeta[l] = dz.sum(axis=0)
            dxhat = dz * bn.gamma[l]
            if acts.mode == "train":
                # mean and variance both depend on every row of the batch
                dz = acts.inv_std[l] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
                )
            else:
                dz = dxhat * acts.inv_std[l]
        gW[l] = dz.T @ acts.hs[l]
        gb[l] = dz.sum(axis=0)
        g = dz @ params.weights[l]
    return DeepGradients(g, gW, gb, ggamma, gbeta)


def deep_param_count(d: int, m: int, Ld: int) -> int:
    """``d*m + m + (m^2 + m)(Ld - 1)``; assumes all ``Ld`` layers have width ``m``."""
    if Ld <= 0:
        return 0
    return d * m + m + (m * m + m) * (Ld - 1)
