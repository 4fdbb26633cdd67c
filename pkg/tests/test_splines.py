import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesim.splines import (
    DuplicateKnot,
    InvalidGrid,
    InvalidOrder,
    InvalidSpan,
    KnotGrid,
    OutOfDomain,
    SplineCoeffs,
    bspline_deriv,
    bspline_eval,
    design_matrix,
    eval_expansion,
    gauss_rule,
    insert_knot,
    make_knot_grid,
)


def naive_cox_de_boor(knots, i, k, t, right_end):
    """Straight-line Cox-de Boor recursion, independent of the package's
    de Boor implementation. Right-continuous; left limit at the domain end."""
    if k == 1:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        if t == right_end and knots[i] < knots[i + 1] == right_end:
            return 1.0
        return 0.0
    v = 0.0
    d1 = knots[i + k - 1] - knots[i]
    if d1 > 0:
        v += (t - knots[i]) / d1 * naive_cox_de_boor(knots, i, k - 1, t, right_end)
    d2 = knots[i + k] - knots[i + 1]
    if d2 > 0:
        v += (knots[i + k] - t) / d2 * naive_cox_de_boor(knots, i + 1, k - 1, t, right_end)
    return v


class TestKnotGrid:
    def test_linear_single_span(self):
        g = make_knot_grid([0, 1], 2)
        assert list(g.knots) == [0, 0, 1, 1]
        assert g.dim == 2

    def test_cubic_two_spans(self):
        # dimension = #spans + order - 1 = 2 + 4 - 1 = 5 by clamped construction
        g = make_knot_grid([0, 1, 2], 4)
        assert list(g.knots) == [0, 0, 0, 0, 1, 2, 2, 2, 2]
        assert g.dim == len(g.knots) - g.order == 5

    def test_dimension_matches_basis_enumeration(self):
        # oracle: count basis functions that are nonzero somewhere in [a, b]
        g = make_knot_grid([0, 0.3, 1], 3)
        ts = np.linspace(0, 1, 200)
        nonzero = 0
        nbasis = len(g.knots) - g.order
        for i in range(nbasis):
            vals = [naive_cox_de_boor(g.knots, i, g.order, t, 1.0) for t in ts]
            if max(vals) > 0:
                nonzero += 1
        assert g.dim == nonzero == 4

    def test_bad_inputs(self):
        with pytest.raises(InvalidGrid):
            make_knot_grid([0, 0], 2)
        with pytest.raises(InvalidGrid):
            make_knot_grid([1, 0], 2)
        with pytest.raises(InvalidOrder):
            make_knot_grid([0, 1], 1)


class TestEval:
    def test_hat_peak(self):
        g = make_knot_grid([0, 1, 2], 2)
        assert bspline_eval(g, 1, 1.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("order", [2, 3, 4])
    def test_partition_of_unity(self, order):
        rng = np.random.default_rng(42)
        bp = np.sort(np.concatenate([[0, 1], rng.uniform(0, 1, 7)]))
        g = make_knot_grid(bp, order)
        for t in np.concatenate([rng.uniform(0, 1, 1000), [0.0, 1.0]]):
            s = sum(bspline_eval(g, i, t) for i in range(g.dim))
            assert abs(s - 1.0) <= 1e-12

    def test_against_naive_recursion(self):
        g = make_knot_grid([0, 1, 2, 3, 4], 4)
        for i in range(g.dim):
            for t in np.linspace(0, 4, 41):
                expect = naive_cox_de_boor(g.knots, i, 4, t, 4.0)
                assert bspline_eval(g, i, t) == pytest.approx(expect, abs=1e-13)

    def test_local_support(self):
        g = make_knot_grid([0, 1, 2, 3, 4, 5], 3)
        for i in range(g.dim):
            lo, hi = g.knots[i], g.knots[i + g.order]
            for t in np.linspace(0, 5, 101):
                if not (lo <= t <= hi):
                    assert bspline_eval(g, i, t) == 0.0

    def test_out_of_domain(self):
        g = make_knot_grid([0, 1], 2)
        with pytest.raises(OutOfDomain):
            bspline_eval(g, 0, 1.5)


class TestDeriv:
    def test_hat_flank_slope(self):
        g = make_knot_grid([0, 2, 3], 2)
        assert bspline_deriv(g, 1, 1.0, 1) == pytest.approx(0.5)

    def test_degree_exhausted(self):
        g = make_knot_grid([0, 1, 2], 3)
        for t in np.linspace(0, 2, 11):
            assert bspline_deriv(g, 1, t, 3) == 0.0

    def test_against_finite_differences(self):
        g = make_knot_grid([0, 0.7, 1.5, 2.6, 4], 4)
        h = 1e-6
        for i in range(g.dim):
            for t in [0.3, 0.9, 2.0, 3.1, 3.9]:
                fd = (bspline_eval(g, i, t + h) - bspline_eval(g, i, t - h)) / (2 * h)
                d = bspline_deriv(g, i, t, 1)
                assert d == pytest.approx(fd, abs=1e-6 * max(1.0, abs(fd)))


class TestExpansion:
    def test_constant(self):
        g = make_knot_grid(np.linspace(0, 1, 6), 4)
        sc = SplineCoeffs(g, np.full((2, g.dim), 3.5))
        for t in np.linspace(0, 1, 17):
            np.testing.assert_allclose(eval_expansion(sc, t), [3.5, 3.5], atol=1e-13)
            np.testing.assert_allclose(eval_expansion(sc, t, nu=1), 0.0, atol=1e-11)

    def test_interpolated_exponential(self):
        g = make_knot_grid(np.linspace(0, 1, 9), 4)
        tau = g.greville()
        D = design_matrix(g, tau)
        c = np.linalg.solve(D, np.exp(-tau))
        sc = SplineCoeffs(g, c[None, :])
        assert eval_expansion(sc, 0.5)[0] == pytest.approx(np.exp(-0.5), abs=1e-5)


class TestInsertKnot:
    def test_constant_preserved(self):
        g = make_knot_grid([0, 1, 2], 4)
        sc = SplineCoeffs(g, np.full((1, g.dim), 2.0))
        sc2 = insert_knot(sc, 0.3)
        np.testing.assert_allclose(sc2.coeffs, 2.0, atol=1e-14)
        assert sc2.grid.dim == g.dim + 1

    def test_hat_midpoint(self):
        g = make_knot_grid([0, 2], 2)
        sc = SplineCoeffs(g, np.array([[0.0, 1.0]]))  # ramp with value 0.5 at 0.5
        sc2 = insert_knot(sc, 0.5)
        assert eval_expansion(sc2, 0.5)[0] == pytest.approx(0.25)
        # new interior coefficient interpolates linearly
        assert sc2.coeffs[0, 1] == pytest.approx(0.25)

    def test_function_preserving_random_cubic(self):
        rng = np.random.default_rng(7)
        g = make_knot_grid([0, 0.4, 1.1, 2, 3], 4)
        sc = SplineCoeffs(g, rng.standard_normal((3, g.dim)))
        sc2 = insert_knot(sc, 1.5)
        ts = np.linspace(0, 3, 100)
        before = eval_expansion(sc, ts)
        after = eval_expansion(sc2, ts)
        assert np.max(np.abs(before - after)) <= 1e-12

    def test_duplicate_rejected(self):
        g = make_knot_grid([0, 1, 2], 3)
        sc = SplineCoeffs(g, np.zeros((1, g.dim)))
        with pytest.raises(DuplicateKnot):
            insert_knot(sc, 1.0)

    @given(st.floats(min_value=0.01, max_value=0.99))
    @settings(max_examples=25, deadline=None)
    def test_function_preserving_property(self, u):
        rng = np.random.default_rng(int(u * 1e6))
        g = make_knot_grid([0, 0.25, 0.5, 0.75, 1], 4)
        if u in g.breakpoints:
            return
        sc = SplineCoeffs(g, rng.standard_normal((1, g.dim)))
        sc2 = insert_knot(sc, u)
        ts = np.linspace(0, 1, 73)
        assert np.max(np.abs(eval_expansion(sc, ts) - eval_expansion(sc2, ts))) <= 1e-12


class TestGaussRule:
    def test_midpoint(self):
        r = gauss_rule((0, 2), 1)
        np.testing.assert_allclose(r.nodes, [1.0])
        np.testing.assert_allclose(r.weights, [2.0])

    def test_cubic_exact_two_points(self):
        r = gauss_rule((0, 1), 2)
        assert np.sum(r.weights * r.nodes**3) == pytest.approx(0.25, abs=1e-15)

    def test_degree_seven_four_points(self):
        r = gauss_rule((0, 1), 4)
        assert np.sum(r.weights * r.nodes**7) == pytest.approx(0.125, abs=1e-14)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_exactness_up_to_2n_minus_1(self, n):
        r = gauss_rule((0.3, 1.7), n)
        for deg in range(2 * n):
            exact = (1.7 ** (deg + 1) - 0.3 ** (deg + 1)) / (deg + 1)
            got = np.sum(r.weights * r.nodes**deg)
            assert abs(got - exact) <= 1e-13 * abs(exact)

    def test_weights_sum_to_length(self):
        r = gauss_rule((-1.5, 2.5), 3)
        assert np.sum(r.weights) == pytest.approx(4.0)

    def test_degenerate_span(self):
        with pytest.raises(InvalidSpan):
            gauss_rule((1, 1), 2)
