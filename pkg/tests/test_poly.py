import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn.cross import CrossParams
from dcn.poly import (
    OpCounter,
    PolynomialParseError,
    SparsePolynomial,
    TractabilityError,
    closed_form_gl,
    coefficient_formula,
    distinct_arrangements,
    layer_tuples,
    monomial_coefficients,
    multi_indices,
    multinomial_multiplicity,
    numeric_readout,
    projection_equivalence,
    symbolic_cross_forward,
    verify_projection,
    verify_cross_polynomial,
)
from dcn.tensor import make_rng

coef = st.floats(-3, 3, allow_nan=False).filter(lambda c: abs(c) > 1e-6)
alpha2 = st.tuples(st.integers(0, 3), st.integers(0, 3))
poly2 = st.dictionaries(alpha2, coef, max_size=6).map(lambda t: SparsePolynomial(2, t))
point2 = st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5)).map(np.array)


@given(poly2, poly2, point2)
@settings(max_examples=100)
def test_arithmetic_is_pointwise(p, q, x):
    assert (p + q)(x) == pytest.approx(p(x) + q(x), abs=1e-9)
    assert (p * q)(x) == pytest.approx(p(x) * q(x), abs=1e-9)
    assert (p - q)(x) == pytest.approx(p(x) - q(x), abs=1e-9)


def test_polynomial_basics():
    x = SparsePolynomial.variable(2, 0)
    y = SparsePolynomial.variable(2, 1)
    p = 3 * x * x * y + y - 2
    assert p.degree == 3
    assert p.coefficient((2, 1)) == 3
    assert p.coefficient((0, 0)) == -2
    assert p.evaluate([2.0, 1.0]) == 11.0
    assert (p - p).terms == {}
    assert (p - p).degree == -1
    assert SparsePolynomial(2, {(1, 0): 1e-13}).terms == {}


def test_parse_and_print_roundtrip():
    p = SparsePolynomial.parse("2*x1*x2 - 0.5 + (x1 + x3)^2", 3)
    assert p.coefficient((1, 1, 0)) == 2.0
    assert p.coefficient((2, 0, 0)) == 1.0
    assert p.coefficient((1, 0, 1)) == 2.0
    assert p.coefficient((0, 0, 0)) == -0.5
    assert SparsePolynomial.parse(p.to_text(), 3) == p
    assert SparsePolynomial.parse("0", 2).terms == {}


@pytest.mark.parametrize("text", ["x4", "x1 / 2", "sin(x1)", "x1**-1", "x1 +", "y"])
def test_parse_rejects(text):
    with pytest.raises(PolynomialParseError):
        SparsePolynomial.parse(text, 3)


def test_symbolic_examples():
    a1, a2 = 0.7, -1.3
    g0 = symbolic_cross_forward([[a1, a2]])
    assert g0.terms == {(1, 0): a1, (0, 1): a2}
    a, b = 0.6, -1.7
    g1 = symbolic_cross_forward([[a], [b]])
    assert g1.coefficient((2,)) == pytest.approx(a * b, abs=1e-15)
    assert g1.coefficient((1,)) == pytest.approx(b, abs=1e-15)
    assert len(g1) == 2


def test_symbolic_rejects_bias_and_size():
    w = np.ones((2, 2))
    with pytest.raises(ValueError):
        symbolic_cross_forward(CrossParams(w, np.ones((2, 2))))
    with pytest.raises(TractabilityError):
        symbolic_cross_forward(np.ones((2, 9)))
    with pytest.raises(TractabilityError):
        symbolic_cross_forward(np.ones((7, 2)))


@pytest.mark.parametrize("d,l", [(1, 3), (2, 2), (3, 3), (4, 1)])
def test_degree_is_exactly_l_plus_one(d, l):
    w = make_rng(d * 10 + l).uniform(-1, 1, (l + 1, d))
    poly = symbolic_cross_forward(w)
    assert poly.degree == l + 1
    assert all(1 <= sum(a) <= l + 1 for a in poly.terms)
    # generic weights: every monomial of degree 1..l+1 is present
    assert len(poly) == sum(1 for _ in multi_indices(d, l + 1, min_degree=1))


def test_degree_never_exceeds_bound_for_degenerate_weights():
    w = np.zeros((4, 3))
    w[0, 0] = 1.0
    poly = symbolic_cross_forward(w)
    assert poly.degree <= 4


def test_terms_persist_with_depth():
    rng = make_rng(4)
    w = rng.uniform(-1, 1, (5, 3))
    prev = set()
    for l in range(5):
        terms = set(symbolic_cross_forward(w[: l + 1]).terms)
        assert prev <= terms
        prev = terms


@pytest.mark.parametrize("d,l", [(1, 0), (2, 2), (3, 4), (5, 2)])
def test_symbolic_matches_numeric(d, l):
    rng = make_rng(100 + d + l)
    w = rng.uniform(-1, 1, (l + 1, d))
    xs = rng.uniform(-1, 1, (10, d))
    np.testing.assert_allclose(symbolic_cross_forward(w).evaluate(xs), numeric_readout(w, xs), atol=1e-9, rtol=0)


def test_closed_form_examples():
    w = np.array([[0.4, -0.9]])
    x = np.array([1.2, 0.3])
    assert closed_form_gl(w, x) == pytest.approx(x @ w[0], abs=1e-15)
    a, b = 0.8, -0.35
    assert closed_form_gl([[a], [b]], [1.0]) == pytest.approx(b + a * b, abs=1e-15)


def test_closed_form_matches_network_d3_l3():
    rng = make_rng(9)
    w = rng.uniform(-1, 1, (4, 3))
    for x in rng.uniform(-1, 1, (10, 3)):
        assert abs(closed_form_gl(w, x) - numeric_readout(w, x)) < 1e-9


def test_layer_tuples_and_arrangements():
    assert layer_tuples(1, 0) == [(0,)]
    assert layer_tuples(2, 2) == [(0, 2), (1, 2)]
    assert layer_tuples(4, 2) == []
    assert sorted(distinct_arrangements((1, 1))) == [(0, 1), (1, 0)]
    assert sorted(distinct_arrangements((2, 0, 1))) == [(0, 0, 2), (0, 2, 0), (2, 0, 0)]
    for alpha in [(2, 1, 1), (3, 0, 2), (1, 1, 1, 1)]:
        assert len(list(distinct_arrangements(alpha))) == multinomial_multiplicity(alpha)


def test_coefficient_formula_examples():
    rng = make_rng(1)
    w = rng.uniform(-1, 1, (3, 3))
    assert coefficient_formula((1, 0, 0), w[:1]) == w[0, 0]
    expected = w[0, 0] * w[1, 1] + w[0, 1] * w[1, 0]
    assert coefficient_formula((1, 1, 0), w[:2]) == pytest.approx(expected, abs=1e-15)
    # degree-3 example at l = 2: sum over permutations (i, j, k) of w0^(i) w1^(j) w2^(k)
    brute = sum(w[0, i] * w[1, j] * w[2, k] for i, j, k in itertools.permutations(range(3)))
    assert coefficient_formula((1, 1, 1), w) == pytest.approx(brute, abs=1e-14)
    assert coefficient_formula((2, 1, 1), w) == 0.0
    assert coefficient_formula((0, 0, 0), w) == 0.0


def test_coefficient_formula_l3_example():
    w = make_rng(2).uniform(-1, 1, (4, 3))
    perms = list(itertools.permutations(range(3)))
    brute = sum(w[0, i] * w[1, j] * w[3, k] + w[0, i] * w[2, j] * w[3, k] + w[1, i] * w[2, j] * w[3, k]
                for i, j, k in perms)
    assert coefficient_formula((1, 1, 1), w) == pytest.approx(brute, abs=1e-14)
    assert symbolic_cross_forward(w).coefficient((1, 1, 1)) == pytest.approx(brute, abs=1e-12)


def test_m_alpha_is_one_for_d1_l1():
    rep = verify_cross_polynomial(1, 1, trials=5, seed=0)
    assert rep.passed
    assert rep.m_alpha == {(1,): pytest.approx(1.0, abs=1e-12), (2,): pytest.approx(1.0, abs=1e-12)}


def test_verify_d2_l2():
    rep = verify_cross_polynomial(2, 2, trials=5, seed=3)
    assert rep.passed, rep.to_text()
    assert rep.max_ratio_spread < 1e-6
    assert rep.degree == 3


def test_verify_depth_zero_only_linear_terms():
    rep = verify_cross_polynomial(2, 0, trials=3, seed=0)
    assert rep.passed
    assert all(sum(a) == 1 for a in rep.m_alpha)


def test_verify_detects_wrong_formula():
    def wrong(alpha, w, l=None):
        return coefficient_formula(alpha, w, l) + (0.1 if sum(alpha) == 2 else 0.0)

    rep = verify_cross_polynomial(2, 1, trials=5, seed=0, coefficient_fn=wrong)
    assert not rep.passed
    assert any("seed=0" in f for f in rep.failures)


def test_monomial_coefficients_table():
    w = make_rng(5).uniform(-1, 1, (3, 2))
    table = monomial_coefficients(w)
    assert len(table) == sum(1 for _ in multi_indices(2, 3, 1))
    assert all(m.M_alpha == pytest.approx(1.0, abs=1e-9) for m in table)


def test_projection_examples():
    fast, explicit = projection_equivalence([2.0], [3.0], [5.0])
    np.testing.assert_array_equal(fast, [30.0])
    np.testing.assert_array_equal(explicit, [30.0])
    fast, explicit = projection_equivalence([1.0, 2.0], [3.0, 4.0], [0.0, 0.0])
    assert not fast.any() and not explicit.any()


def test_projection_d32_and_limits():
    rep = verify_projection(32, draws=10, seed=1)
    assert rep.max_abs_diff < 1e-10
    with pytest.raises(TractabilityError):
        projection_equivalence(np.ones(65), np.ones(65), np.ones(65))


def test_projection_operation_counts():
    f8, e8, f64, e64 = OpCounter(), OpCounter(), OpCounter(), OpCounter()
    projection_equivalence(np.ones(8), np.ones(8), np.ones(8), f8, e8)
    projection_equivalence(np.ones(64), np.ones(64), np.ones(64), f64, e64)
    assert e64.mults / e8.mults == 64
    assert f64.mults / f8.mults == 8
