import numpy as np
import pytest

from ivcm.errors import DerivativeOrderTooHigh, OutOfDomain
from ivcm.splines import make_basis


class TestEvaluate:
    def test_piecewise_constant_indicators(self):
        basis = make_basis(1, 2, 10.0)
        np.testing.assert_array_equal(basis.evaluate(3.0), [1.0, 0.0])
        np.testing.assert_array_equal(basis.evaluate(7.0), [0.0, 1.0])

    def test_partition_of_unity_random_points(self):
        rng = np.random.default_rng(0)
        for order, qn in [(1, 3), (2, 5), (3, 7), (4, 4), (4, 12)]:
            basis = make_basis(order, qn, 10.0)
            t = rng.uniform(0, 10, 1000)
            sums = basis.evaluate(t).sum(axis=1)
            assert np.abs(sums - 1.0).max() <= 1e-12

    def test_bernstein_endpoints(self):
        basis = make_basis(4, 4, 10.0)
        np.testing.assert_array_equal(basis.evaluate(0.0), [1, 0, 0, 0])
        np.testing.assert_array_equal(basis.evaluate(10.0), [0, 0, 0, 1])

    def test_out_of_domain(self):
        basis = make_basis(4, 6, 10.0)
        with pytest.raises(OutOfDomain):
            basis.evaluate(-0.001)
        with pytest.raises(OutOfDomain):
            basis.evaluate(10.001)

    def test_nonnegative_and_local_support(self):
        basis = make_basis(4, 9, 10.0)
        t = np.linspace(0, 10, 401)
        vals = basis.evaluate(t)
        assert vals.min() >= 0
        knots = basis.knots
        for k in range(basis.dimension):
            lo, hi = knots[k], knots[k + basis.order]
            outside = (t < lo) | (t > hi)
            assert np.abs(vals[outside, k]).max() == 0.0

    def test_quantile_placement(self):
        rng = np.random.default_rng(1)
        times = rng.uniform(0, 10, 500)
        basis = make_basis(4, 9, 10.0, placement="quantile", times=times)
        expected = np.quantile(times, np.linspace(0, 1, 7)[1:-1])
        np.testing.assert_allclose(basis.interior_knots, expected)

    def test_quantile_dedup_warns_and_shrinks(self):
        times = np.array([5.0] * 50 + [2.0] * 2)
        with pytest.warns(UserWarning):
            basis = make_basis(4, 10, 10.0, placement="quantile", times=times)
        assert basis.dimension < 10


class TestDerivative:
    def test_k0_matches_evaluate(self):
        basis = make_basis(4, 8, 10.0)
        t = np.linspace(0, 10, 33)
        np.testing.assert_array_equal(basis.evaluate_derivative(t, 0),
                                      basis.evaluate(t))

    def test_derivative_sums_to_zero(self):
        basis = make_basis(4, 10, 10.0)
        t = np.linspace(0, 10, 101)
        for k in (1, 2, 3):
            sums = basis.evaluate_derivative(t, k).sum(axis=1)
            assert np.abs(sums).max() <= 1e-10

    def test_second_derivative_matches_finite_difference(self):
        basis = make_basis(4, 10, 10.0)
        rng = np.random.default_rng(5)
        t = rng.uniform(0.1, 9.9, 40)
        h = 1e-5
        fd = (basis.evaluate(t + h) - 2 * basis.evaluate(t)
              + basis.evaluate(t - h)) / h**2
        exact = basis.evaluate_derivative(t, 2)
        assert np.abs(fd - exact).max() <= 1e-4

    def test_order_too_high(self):
        basis = make_basis(3, 6, 10.0)
        with pytest.raises(DerivativeOrderTooHigh):
            basis.evaluate_derivative(1.0, 3)


class TestPenaltyGram:
    def test_linear_hats_hand_integral(self):
        basis = make_basis(2, 2, 1.0)
        np.testing.assert_allclose(basis.penalty_gram(1),
                                   [[1.0, -1.0], [-1.0, 1.0]], atol=1e-12)

    def test_annihilates_low_degree_polynomials(self):
        # coefficients representing constants/linears lie in the null space
        for order, qn, k in [(4, 9, 2), (3, 6, 1), (4, 7, 3)]:
            basis = make_basis(order, qn, 10.0)
            gram = basis.penalty_gram(k)
            t = np.linspace(0, 10, 200)
            bmat = basis.evaluate(t)
            for deg in range(k):
                target = t ** deg
                coef, *_ = np.linalg.lstsq(bmat, target, rcond=None)
                assert coef @ gram @ coef <= 1e-8

    def test_rank_is_qn_minus_k(self):
        for order, qn, k in [(4, 9, 2), (4, 6, 1), (3, 8, 2)]:
            basis = make_basis(order, qn, 10.0)
            gram = basis.penalty_gram(k)
            eigs = np.linalg.eigvalsh(gram)
            assert eigs.min() >= -1e-10
            rank = int(np.sum(eigs > 1e-10 * max(1.0, eigs.max())))
            assert rank == qn - k

    def test_symmetric_psd(self):
        basis = make_basis(4, 11, 10.0)
        gram = basis.penalty_gram(2)
        assert np.abs(gram - gram.T).max() == 0.0
        assert np.linalg.eigvalsh(gram).min() >= -1e-10

    def test_quadrature_matches_dense_numeric_integral(self):
        basis = make_basis(4, 7, 10.0)
        gram = basis.penalty_gram(2)
        t = np.linspace(0, 10, 20001)
        dmat = basis.evaluate_derivative(t, 2)
        numeric = np.trapezoid(dmat[:, :, None] * dmat[:, None, :], t, axis=0)
        np.testing.assert_allclose(gram, numeric, atol=1e-5)


class TestApproximation:
    def test_polynomial_reproduction(self):
        # degree < order polynomials are reproduced exactly by projection
        rng = np.random.default_rng(9)
        for order in (2, 3, 4):
            basis = make_basis(order, order + 5, 10.0)
            t = np.linspace(0, 10, 400)
            bmat = basis.evaluate(t)
            coeffs = rng.normal(size=order)
            target = sum(c * t ** p for p, c in enumerate(coeffs))
            sol, *_ = np.linalg.lstsq(bmat, target, rcond=None)
            assert np.abs(bmat @ sol - target).max() <= 1e-8
