"""Cross network: ``x_{l+1} = x0 * (x_l . w_l) + b_l + x_l``.

Every layer is evaluated through the scalar ``s_l = x_l . w_l``, so neither
the forward nor the backward pass ever forms the ``d x d`` outer product
``x0 x_l^T``. All functions accept a single example (1-d arrays) or a batch
(2-d arrays with one example per row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, uniform


@dataclass
class CrossParams:
    """``weights[l]`` and ``biases[l]`` are rows of ``(depth, dim)`` arrays."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.biases = np.asarray(self.biases, dtype=DTYPE)
        if self.weights.ndim != 2 or self.weights.shape != self.biases.shape:
            raise ShapeError(
                f"cross weights {self.weights.shape} and biases {self.biases.shape} must be equal (depth, dim)"
            )

    @property
    def depth(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, dim: int, depth: int) -> "CrossParams":
        return cls(np.zeros((depth, dim)), np.zeros((depth, dim)))

    @classmethod
    def initialize(cls, dim: int, depth: int, rng: np.random.Generator) -> "CrossParams":
        limit = 1.0 / math.sqrt(dim) if dim else 0.0
        w = uniform(rng, limit, (depth, dim))
        b = uniform(rng, limit, (depth, dim))
        return cls(w, b)

    def num_params(self) -> int:
        return cross_param_count(self.dim, self.depth)


@dataclass
class CrossActivations:
    """``xs[0]`` is the input, ``xs[l]`` the output of layer ``l - 1``; ``s[l] = xs[l] . w_l``."""

    xs: list[np.ndarray]
    s: list[np.ndarray] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.xs[0]

    @property
    def output(self) -> np.ndarray:
        return self.xs[-1]


def _check_same(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape[-1] != shape[-1]:
            raise ShapeError(f"cross layer: vector lengths {[x.shape[-1] for x in arrays]} differ")


def cross_layer_forward(x0, xl, w, b) -> np.ndarray:
    x0 = np.asarray(x0, dtype=DTYPE)
    xl = np.asarray(xl, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    _check_same(x0, xl, w, b)
    if x0.shape != xl.shape:
        raise ShapeError(f"x0 {x0.shape} and x_l {xl.shape} differ")
    s = xl @ w
    return x0 * s[..., None] + b + xl if x0.ndim == 2 else x0 * s + b + xl


def cross_forward(params: CrossParams, x0) -> CrossActivations:
    x0 = np.asarray(x0, dtype=DTYPE)
    if x0.shape[-1] != params.dim and params.depth > 0:
        raise ShapeError(f"x0 has length {x0.shape[-1]}, cross network expects {params.dim}")
    xs = [x0]
    ss = []
    xl = x0
    for w, b in zip(params.weights, params.biases):
        s = xl @ w
        xl = (x0 * s[..., None] if x0.ndim == 2 else x0 * s) + b + xl
        ss.append(s)
        xs.append(xl)
    return CrossActivations(xs, ss)


@dataclass
class CrossGradients:
    x0: np.ndarray
    weights: np.ndarray
    biases: np.ndarray


def cross_backward(acts: CrossActivations, params: CrossParams, grad_out) -> CrossGradients:
    """Backpropagate ``grad_out = dL/dx_L`` through all cross layers.

    For batched input the weight and bias gradients are summed over the batch.
    The returned ``x0`` gradient includes the contribution of every layer in
    which ``x0`` appears, plus the residual path from ``x_0`` itself.
    """
    g = np.asarray(grad_out, dtype=DTYPE)
    x0 = acts.x0
    if g.shape != x0.shape:
        raise ShapeError(f"grad_out {g.shape} does not match activations {x0.shape}")
    batched = g.ndim == 2
    gw = np.zeros_like(params.weights)
    gb = np.zeros_like(params.biases)
    gx0 = np.zeros_like(x0)
    for l in range(params.depth - 1, -1, -1):
        xl = acts.xs[l]
        s = acts.s[l]
        w = params.weights[l]
        if batched:
            t = np.einsum("ij,ij->i", x0, g)
            gb[l] = g.sum(axis=0)
            gw[l] = t @ xl
            gx0 += s[:, None] * g
            g = g + t[:, None] * w
        else:
            t = x0 @ g
            gb[l] = g
            gw[l] = t * xl
            gx0 += s * g
            g = g + t * w
    gx0 += g
    return CrossGradients(gx0, gw, gb)


def cross_param_count(d: int, Lc: int) -> int:
    return d * Lc * 2
