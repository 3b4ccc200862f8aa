"""Symbolic verification of the cross network's polynomial structure.

With all biases zero, an ``l``-layer cross network read out through ``w_l``,
``g_l(x) = x_l . w_l``, is a polynomial in ``x = x0``. This module expands it
exactly with sparse polynomial arithmetic and compares it against two
independent descriptions of the same function:

* the subset-product form ``g_l = sum over S subset of {0..l-1} of
  prod_{j in S + {l}} (x . w_j)``, evaluated numerically, and
* the per-monomial coefficient formula, a double sum over strictly
  increasing layer tuples ending in ``l`` and distinct arrangements of the
  monomial's variable multiset.
"""

from __future__ import annotations

import ast
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .cross import CrossParams, cross_forward
from .tensor import DTYPE, ShapeError, derive_rng

PRUNE_TOL = 1e-12
MAX_SYMBOLIC_DIM = 8
MAX_SYMBOLIC_DEPTH = 5
MAX_PROJECTION_DIM = 64


class TractabilityError(ValueError):
    pass


class PolynomialParseError(ValueError):
    pass


class SparsePolynomial:
    """Multivariate polynomial stored as ``{exponent tuple: coefficient}``."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: dict | None = None, prune: float = PRUNE_TOL):
        self.nvars = nvars
        self.terms: dict[tuple[int, ...], float] = {}
        for alpha, c in (terms or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != nvars or any(a < 0 for a in alpha):
                raise ValueError(f"bad multi-index {alpha} for {nvars} variables")
            if abs(c) > prune:
                self.terms[alpha] = float(c)

    @classmethod
    def constant(cls, nvars: int, c: float) -> "SparsePolynomial":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars: int, i: int, coef: float = 1.0) -> "SparsePolynomial":
        alpha = [0] * nvars
        alpha[i] = 1
        return cls(nvars, {tuple(alpha): coef})

    @classmethod
    def linear(cls, w: Sequence[float]) -> "SparsePolynomial":
        """``sum_i w[i] x_i``."""
        n = len(w)
        return cls(n, {tuple(int(j == i) for j in range(n)): float(c) for i, c in enumerate(w)})

    def _check(self, other: "SparsePolynomial"):
        if other.nvars != self.nvars:
            raise ValueError(f"variable counts differ: {self.nvars} vs {other.nvars}")

    def __add__(self, other):
        if not isinstance(other, SparsePolynomial):
            other = SparsePolynomial.constant(self.nvars, float(other))
        self._check(other)
        out = dict(self.terms)
        for a, c in other.terms.items():
            out[a] = out.get(a, 0.0) + c
        return SparsePolynomial(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return SparsePolynomial(self.nvars, {a: -c for a, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, SparsePolynomial) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, SparsePolynomial):
            k = float(other)
            return SparsePolynomial(self.nvars, {a: c * k for a, c in self.terms.items()})
        self._check(other)
        out: dict[tuple[int, ...], float] = {}
        for a, ca in self.terms.items():
            for b, cb in other.terms.items():
                key = tuple(x + y for x, y in zip(a, b))
                out[key] = out.get(key, 0.0) + ca * cb
        return SparsePolynomial(self.nvars, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0 or int(k) != k:
            raise ValueError("only non-negative integer powers are supported")
        out = SparsePolynomial.constant(self.nvars, 1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    def __eq__(self, other):
        return isinstance(other, SparsePolynomial) and self.nvars == other.nvars and self.terms == other.terms

    def __len__(self):
        return len(self.terms)

    def coefficient(self, alpha: Sequence[int]) -> float:
        return self.terms.get(tuple(alpha), 0.0)

    @property
    def degree(self) -> int:
        """Highest total degree; the zero polynomial has degree -1."""
        return max((sum(a) for a in self.terms), default=-1)

    def degree_spread(self) -> tuple[int, int]:
        degs = [sum(a) for a in self.terms]
        return (min(degs), max(degs)) if degs else (-1, -1)

    def __call__(self, x) -> np.ndarray | float:
        return self.evaluate(x)

    def evaluate(self, x):
        """Evaluate at one point (length ``nvars``) or at each row of a 2-d array."""
        x = np.asarray(x, dtype=DTYPE)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.nvars:
            raise ShapeError(f"polynomial has {self.nvars} variables, got points of width {X.shape[1]}")
        out = np.zeros(X.shape[0], dtype=DTYPE)
        for a, c in self.terms.items():
            term = np.full(X.shape[0], c)
            for i, e in enumerate(a):
                if e:
                    term = term * X[:, i] ** e
            out += term
        return float(out[0]) if single else out

    def variables(self) -> list[int]:
        """Indices of variables that appear with a nonzero exponent."""
        return sorted({i for a in self.terms for i, e in enumerate(a) if e})

    def __repr__(self):
        return f"SparsePolynomial({self.nvars}, {self.to_text()!r})"

    def to_text(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for a in sorted(self.terms, key=lambda a: (sum(a), tuple(-e for e in a))):
            c = self.terms[a]
            factors = [f"x{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(a) if e]
            parts.append("*".join([repr(c)] + factors))
        return " + ".join(parts).replace("+ -", "- ")

    @classmethod
    def parse(cls, text: str, nvars: int) -> "SparsePolynomial":
        """Parse text like ``"3*x1*x2 - 0.5 + (x1 + x3)^2"``; variables are ``x1 .. x{nvars}``."""
        src = text.replace("^", "**")
        try:
            tree = ast.parse(src, mode="eval")
        except SyntaxError as e:
            raise PolynomialParseError(f"cannot parse polynomial {text!r}: {e.msg}") from e

        def build(node):
            if isinstance(node, ast.Expression):
                return build(node.body)
            if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
                return cls.constant(nvars, float(node.value))
            if isinstance(node, ast.Name):
                name = node.id
                if name.startswith("x") and name[1:].isdigit() and 1 <= int(name[1:]) <= nvars:
                    return cls.variable(nvars, int(name[1:]) - 1)
                raise PolynomialParseError(f"unknown variable {name!r} (expected x1..x{nvars})")
            if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
                v = build(node.operand)
                return -v if isinstance(node.op, ast.USub) else v
            if isinstance(node, ast.BinOp):
                if isinstance(node.op, ast.Pow):
                    exp = node.right
                    if not (isinstance(exp, ast.Constant) and isinstance(exp.value, int) and exp.value >= 0):
                        raise PolynomialParseError("exponents must be non-negative integer literals")
                    return build(node.left) ** exp.value
                ops = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b, ast.Mult: lambda a, b: a * b}
                for op_type, fn in ops.items():
                    if isinstance(node.op, op_type):
                        return fn(build(node.left), build(node.right))
            raise PolynomialParseError(f"unsupported expression in polynomial: {ast.dump(node)}")

        return build(tree)


PolyVector = list  # list[SparsePolynomial], one entry per coordinate


def _check_symbolic_bounds(d: int, l: int):
    if d > MAX_SYMBOLIC_DIM or l > MAX_SYMBOLIC_DEPTH:
        raise TractabilityError(
            f"symbolic expansion limited to d <= {MAX_SYMBOLIC_DIM}, l <= {MAX_SYMBOLIC_DEPTH}; got d={d}, l={l}"
        )


def _readout_weights(weights, l: int | None) -> np.ndarray:
    w = np.atleast_2d(np.asarray(weights, dtype=DTYPE))
    if l is None:
        l = w.shape[0] - 1
    if w.shape[0] < l + 1:
        raise ShapeError(f"depth {l} needs {l + 1} weight vectors, got {w.shape[0]}")
    return w[: l + 1]


def symbolic_cross_forward(weights, l: int | None = None, biases=None) -> SparsePolynomial:
    """Expand ``g_l(x) = x_l . w_l`` symbolically.

    ``weights`` holds ``w_0 .. w_l`` as rows (a ``CrossParams`` is accepted
    too, whose last layer then serves as the readout).
    """
    if isinstance(weights, CrossParams):
        biases = weights.biases if biases is None else biases
        weights = weights.weights
    w = _readout_weights(weights, l)
    l = w.shape[0] - 1
    d = w.shape[1]
    if biases is not None and np.any(np.asarray(biases) != 0):
        raise ValueError("symbolic expansion requires all cross biases to be zero")
    _check_symbolic_bounds(d, l)
    x0 = [SparsePolynomial.variable(d, i) for i in range(d)]
    xl = list(x0)
    for k in range(l):
        s = _poly_dot(xl, w[k])
        xl = [x0[i] * s + xl[i] for i in range(d)]
    return _poly_dot(xl, w[l])


def _poly_dot(vec: PolyVector, w) -> SparsePolynomial:
    out = SparsePolynomial(vec[0].nvars)
    for p, c in zip(vec, w):
        out = out + p * float(c)
    return out


def numeric_readout(weights, x0, l: int | None = None) -> np.ndarray | float:
    """``x_l . w_l`` from the numeric cross network with zero biases."""
    w = _readout_weights(weights, l)
    params = CrossParams(w[:-1], np.zeros_like(w[:-1]))
    acts = cross_forward(params, x0)
    return acts.output @ w[-1]


def closed_form_gl(weights, x0, l: int | None = None) -> float:
    """Sum over subsets ``S`` of ``{0..l-1}`` of ``prod_{j in S + {l}} (x0 . w_j)``."""
    w = _readout_weights(weights, l)
    l = w.shape[0] - 1
    proj = w @ np.asarray(x0, dtype=DTYPE)
    total = 0.0
    for r in range(l + 1):
        for subset in itertools.combinations(range(l), r):
            total += float(np.prod(proj[list(subset)])) * proj[l]
    return total


def layer_tuples(p: int, l: int) -> list[tuple[int, ...]]:
    """Strictly increasing tuples of length ``p`` over ``{0..l}`` whose last entry is ``l``."""
    if p < 1 or p > l + 1:
        return []
    return [c + (l,) for c in itertools.combinations(range(l), p - 1)]


def distinct_arrangements(alpha: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """All distinct orderings of the multiset with ``alpha[i]`` copies of variable ``i``."""
    counts = Counter({i: a for i, a in enumerate(alpha) if a})
    n = sum(alpha)
    seq: list[int] = []

    def rec():
        if len(seq) == n:
            yield tuple(seq)
            return
        for v in sorted(counts):
            if counts[v]:
                counts[v] -= 1
                seq.append(v)
                yield from rec()
                seq.pop()
                counts[v] += 1

    yield from rec()


def coefficient_formula(alpha: Sequence[int], weights, l: int | None = None) -> float:
    w = _readout_weights(weights, l)
    l = w.shape[0] - 1
    p = int(sum(alpha))
    B = layer_tuples(p, l)
    if not B:
        return 0.0
    I = np.array(B, dtype=np.int64)
    J = np.array(list(distinct_arrangements(alpha)), dtype=np.int64)
    # w[I[b, k], J[q, k]] for every (b, q) pair, multiplied along k
    prods = w[I[:, None, :], J[None, :, :]].prod(axis=-1)
    return float(prods.sum())


def multi_indices(d: int, max_degree: int, min_degree: int = 0) -> Iterator[tuple[int, ...]]:
    for deg in range(min_degree, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            alpha = [0] * d
            for i in combo:
                alpha[i] += 1
            yield tuple(alpha)


def multinomial_multiplicity(alpha: Sequence[int]) -> int:
    """Number of distinct arrangements of the multiset ``alpha``."""
    n = sum(alpha)
    out = math.factorial(n)
    for a in alpha:
        out //= math.factorial(a)
    return out


@dataclass
class MonomialCoefficient:
    alpha: tuple[int, ...]
    value: float
    M_alpha: float


@dataclass
class VerifyReport:
    d: int
    l: int
    trials: int
    seed: int
    failures: list[str] = field(default_factory=list)
    max_high_degree_coef: float = 0.0
    max_closed_form_diff: float = 0.0
    max_symbolic_numeric_diff: float = 0.0
    max_ratio_spread: float = 0.0
    degree: int = -1
    m_alpha: dict[tuple[int, ...], float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        return {
            "d": self.d,
            "l": self.l,
            "trials": self.trials,
            "seed": self.seed,
            "passed": self.passed,
            "degree": self.degree,
            "max_high_degree_coef": self.max_high_degree_coef,
            "max_closed_form_diff": self.max_closed_form_diff,
            "max_symbolic_numeric_diff": self.max_symbolic_numeric_diff,
            "max_ratio_spread": self.max_ratio_spread,
            "m_alpha": {",".join(map(str, a)): v for a, v in sorted(self.m_alpha.items())},
            "failures": list(self.failures),
        }

    def to_text(self) -> str:
        lines = [
            f"d={self.d} l={self.l} trials={self.trials} seed={self.seed}: {'PASS' if self.passed else 'FAIL'}",
            f"  degree={self.degree} max|c(|a|>l+1)|={self.max_high_degree_coef:.3e} "
            f"closed-form diff={self.max_closed_form_diff:.3e} symbolic/numeric diff={self.max_symbolic_numeric_diff:.3e} "
            f"ratio spread={self.max_ratio_spread:.3e}",
        ]
        for a, m in sorted(self.m_alpha.items(), key=lambda kv: (sum(kv[0]), kv[0])):
            lines.append(f"  M{list(a)} = {m:.12g}")
        lines.extend(f"  failure: {f}" for f in self.failures)
        return "\n".join(lines)


RATIO_SPREAD_TOL = 1e-6
VALUE_TOL = 1e-9


def verify_cross_polynomial(d: int, l: int, trials: int = 5, seed: int = 0, points: int = 10,
                            coefficient_fn: Callable = coefficient_formula) -> VerifyReport:
    """Check degree bound, closed form, and per-monomial coefficient structure.

    Each trial draws weights ``w_0 .. w_l`` uniformly from ``[-1, 1]^d`` with
    its own seed ``(seed, d, l, trial)``, reported on failure.
    """
    _check_symbolic_bounds(d, l)
    if trials < 1:
        raise ValueError("need at least one trial")
    rep = VerifyReport(d, l, trials, seed)
    ratios: dict[tuple[int, ...], list[float]] = {}
    for t in range(trials):
        rng = derive_rng(seed, d, l, t)
        w = rng.uniform(-1.0, 1.0, size=(l + 1, d))
        tag = f"(d={d}, l={l}, seed={seed}, trial={t})"
        poly = symbolic_cross_forward(w)
        rep.degree = max(rep.degree, poly.degree)

        high = [abs(c) for a, c in poly.terms.items() if sum(a) > l + 1]
        if high:
            rep.max_high_degree_coef = max(rep.max_high_degree_coef, max(high))
            rep.failures.append(f"nonzero coefficient above degree {l + 1} {tag}")
        if poly.degree != l + 1:
            rep.failures.append(f"expansion has degree {poly.degree}, expected {l + 1} {tag}")

        xs = rng.uniform(-1.0, 1.0, size=(points, d))
        numeric = numeric_readout(w, xs)
        symbolic = poly.evaluate(xs)
        closed = np.array([closed_form_gl(w, x) for x in xs])
        cf_diff = float(np.max(np.abs(closed - numeric)))
        sn_diff = float(np.max(np.abs(symbolic - numeric)))
        rep.max_closed_form_diff = max(rep.max_closed_form_diff, cf_diff)
        rep.max_symbolic_numeric_diff = max(rep.max_symbolic_numeric_diff, sn_diff)
        if not cf_diff < VALUE_TOL:
            rep.failures.append(f"closed form differs from network by {cf_diff:.3e} {tag}")
        if not sn_diff < VALUE_TOL:
            rep.failures.append(f"symbolic expansion differs from network by {sn_diff:.3e} {tag}")

        for alpha in multi_indices(d, l + 1, min_degree=1):
            formula = coefficient_fn(alpha, w, l)
            sym = poly.coefficient(alpha)
            if formula == 0.0:
                if sym != 0.0:
                    rep.failures.append(f"formula is 0 but expansion has {sym:.3e} at alpha={alpha} {tag}")
                continue
            ratio = sym / formula
            if not math.isfinite(ratio):
                rep.failures.append(f"non-finite coefficient ratio at alpha={alpha} {tag}")
                continue
            ratios.setdefault(alpha, []).append(ratio)

    for alpha, rs in ratios.items():
        mean = float(np.mean(rs))
        spread = (max(rs) - min(rs)) / max(abs(mean), 1e-300)
        rep.m_alpha[alpha] = mean
        rep.max_ratio_spread = max(rep.max_ratio_spread, spread)
        if not spread < RATIO_SPREAD_TOL:
            rep.failures.append(
                f"coefficient ratio for alpha={alpha} varies across trials (spread {spread:.3e}) "
                f"(d={d}, l={l}, seed={seed})"
            )
    return rep


def monomial_coefficients(weights, l: int | None = None) -> list[MonomialCoefficient]:
    """Coefficients of every monomial of degree 1..l+1 with their measured ``M_alpha``."""
    w = _readout_weights(weights, l)
    l = w.shape[0] - 1
    poly = symbolic_cross_forward(w)
    out = []
    for alpha in multi_indices(w.shape[1], l + 1, min_degree=1):
        f = coefficient_formula(alpha, w)
        c = poly.coefficient(alpha)
        out.append(MonomialCoefficient(alpha, c, c / f if f else math.nan))
    return out


class OpCounter:
    """Counts scalar multiplications performed by the projection paths."""

    def __init__(self):
        self.mults = 0

    def add(self, n: int):
        self.mults += int(n)


def projection_fast(x0, xt, w, counter: OpCounter | None = None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=DTYPE)
    s = float(np.asarray(xt, dtype=DTYPE) @ np.asarray(w, dtype=DTYPE))
    if counter is not None:
        counter.add(2 * x0.shape[0])  # d for the dot product, d for the scaling
    return x0 * s


def block_diagonal_projection(w) -> np.ndarray:
    """The ``d^2 x d`` matrix with ``w`` as its ``i``-th diagonal block column."""
    w = np.asarray(w, dtype=DTYPE)
    d = w.shape[0]
    return np.kron(np.eye(d), w.reshape(d, 1))


def projection_explicit(x0, xt, w, counter: OpCounter | None = None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=DTYPE)
    xt = np.asarray(xt, dtype=DTYPE)
    d = x0.shape[0]
    row = np.outer(x0, xt).reshape(d * d)  # [x1*xt1 .. x1*xtd, ..., xd*xt1 .. xd*xtd]
    proj = block_diagonal_projection(w)
    out = np.empty(d, dtype=DTYPE)
    for i in range(d):
        # only block i of column i is nonzero
        out[i] = row[i * d:(i + 1) * d] @ proj[i * d:(i + 1) * d, i]
    if counter is not None:
        counter.add(d * d)  # pairwise products
        counter.add(d * d)  # block multiply-adds
    return out


def projection_equivalence(x0, xt, w, fast_counter: OpCounter | None = None,
                           explicit_counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    x0 = np.asarray(x0, dtype=DTYPE)
    xt = np.asarray(xt, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    if not (x0.shape == xt.shape == w.shape and x0.ndim == 1):
        raise ShapeError("projection inputs must be vectors of equal length")
    if x0.shape[0] > MAX_PROJECTION_DIM:
        raise TractabilityError(f"explicit projection limited to d <= {MAX_PROJECTION_DIM}")
    return projection_fast(x0, xt, w, fast_counter), projection_explicit(x0, xt, w, explicit_counter)


@dataclass
class ProjectionReport:
    d: int
    draws: int
    max_abs_diff: float
    fast_ops: int
    explicit_ops: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < 1e-10


def verify_projection(d: int, draws: int = 10, seed: int = 0) -> ProjectionReport:
    worst = 0.0
    fc, ec = OpCounter(), OpCounter()
    for t in range(draws):
        rng = derive_rng(seed, d, t)
        x0, xt, w = rng.uniform(-1.0, 1.0, size=(3, d))
        f1, f2 = OpCounter(), OpCounter()
        fast, explicit = projection_equivalence(x0, xt, w, f1, f2)
        worst = max(worst, float(np.max(np.abs(fast - explicit))))
        if t == 0:
            fc, ec = f1, f2
    return ProjectionReport(d, draws, worst, fc.mults, ec.mults)


# contract name for verify_cross_polynomial
verify_theorem = verify_cross_polynomial
