import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import quad

from accelflow.core.errors import CapabilityError, UsageError
from accelflow.core.targets import (
    GaussianInitial,
    GaussianMixtureTarget,
    GaussianTarget,
    Observable,
    Phi0,
    derive_seeds,
    expectation_truth,
    initial_momentum,
    make_rng,
    monte_carlo_expectation,
    quadrature_expectation,
    sample_initial,
)


def central_difference(target, x, h=1e-5):
    return (target.potential(np.array([x + h])) - target.potential(np.array([x - h]))) / (2 * h)


class TestGaussianTarget:
    @pytest.mark.unit
    def test_gradient_examples(self, gaussian_target):
        assert_array_equal(gaussian_target.grad_potential(np.array([-5.0])), [0.0])
        assert_allclose(gaussian_target.grad_potential(np.array([-4.0])), [4.0], rtol=1e-14)

    @pytest.mark.unit
    def test_log_density_examples(self, gaussian_target):
        standard = GaussianTarget([0.0], [[1.0]])
        assert standard.log_density(np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
        assert gaussian_target.log_density(np.array([-5.0])) == pytest.approx(-0.5 * math.log(2 * math.pi * 0.25))

    @pytest.mark.unit
    def test_batched_shapes(self, gaussian_target):
        x = np.linspace(-8, 2, 7).reshape(-1, 1)
        assert gaussian_target.grad_potential(x).shape == (7, 1)
        assert gaussian_target.log_density(x).shape == (7,)

    @pytest.mark.unit
    def test_dimension_mismatch(self, gaussian_target):
        with pytest.raises(UsageError):
            gaussian_target.grad_potential(np.zeros((3, 2)))

    @pytest.mark.unit
    @pytest.mark.parametrize("cov", [[[1.0, 2.0], [2.0, 1.0]], [[1.0, 0.5], [0.0, 1.0]], [[0.0, 0.0], [0.0, 1.0]]])
    def test_invalid_covariance_rejected(self, cov):
        with pytest.raises(UsageError):
            GaussianTarget([0.0, 0.0], cov)

    @pytest.mark.unit
    def test_multivariate_gradient(self):
        q = np.array([[2.0, 0.3], [0.3, 0.5]])
        target = GaussianTarget([1.0, -1.0], q)
        x = np.array([[0.2, 0.4], [3.0, -2.0]])
        expected = np.linalg.solve(q, (x - target.mean).T).T
        assert_allclose(target.grad_potential(x), expected, rtol=1e-12)

    @pytest.mark.unit
    def test_closed_form_requires_one_dimension(self):
        with pytest.raises(CapabilityError):
            GaussianTarget([0.0, 0.0], np.eye(2)).exact_expectation(Observable.MEAN)


class TestMixtureTarget:
    @pytest.mark.unit
    def test_gradient_at_symmetry_point(self, mixture_target):
        assert mixture_target.grad_potential(np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.unit
    def test_gradient_matches_finite_difference(self, mixture_target):
        assert mixture_target.grad_potential(np.array([1.0]))[0] == pytest.approx(
            central_difference(mixture_target, 1.0), abs=1e-6)

    @pytest.mark.unit
    def test_symmetry(self, mixture_target):
        x = np.linspace(-6, 6, 25).reshape(-1, 1)
        assert_allclose(mixture_target.log_density(x), mixture_target.log_density(-x), rtol=1e-13)
        assert_allclose(mixture_target.grad_potential(x), -mixture_target.grad_potential(-x), atol=1e-12)

    @pytest.mark.unit
    def test_far_tail_gradient_is_finite(self, mixture_target):
        grad = mixture_target.grad_potential(np.array([[-400.0], [400.0]]))
        assert np.all(np.isfinite(grad))
        assert grad[0, 0] == pytest.approx((-400.0 + 2.0) / 0.8)

    @pytest.mark.unit
    def test_density_integrates_to_one(self, mixture_target):
        mass, _ = quad(lambda x: math.exp(mixture_target.log_density(np.array([x]))), -np.inf, np.inf)
        assert mass == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.unit
    @pytest.mark.parametrize("weights", [[0.5, 0.6], [1.0, 0.0], [-0.5, 1.5]])
    def test_invalid_weights(self, weights):
        with pytest.raises(UsageError):
            GaussianMixtureTarget(weights, [[0.0], [1.0]], [[[1.0]], [[1.0]]])


@pytest.mark.unit
@pytest.mark.parametrize("target", [
    GaussianTarget([-5.0], [[0.25]]),
    GaussianTarget([0.3], [[2.0]]),
    GaussianMixtureTarget.symmetric(2.0, 0.8),
])
def test_gradient_equals_finite_difference_on_grid(target):
    for x in np.linspace(-10, 10, 100):
        assert target.grad_potential(np.array([x]))[0] == pytest.approx(central_difference(target, x), abs=1e-6)


class TestExpectations:
    @pytest.mark.unit
    def test_standard_half_normal(self):
        value = GaussianTarget([0.0], [[1.0]]).exact_expectation(Observable.HALF_RECTIFIED_IDENTITY)
        assert value == pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-14)

    @pytest.mark.unit
    def test_mixture_values(self, mixture_target):
        assert mixture_target.exact_expectation(Observable.HALF_RECTIFIED_IDENTITY) == pytest.approx(1.0039, abs=1e-4)
        assert mixture_target.exact_expectation(Observable.MEAN) == pytest.approx(0.0, abs=1e-15)
        assert mixture_target.exact_expectation(Observable.SECOND_MOMENT) == pytest.approx(4.8)

    @pytest.mark.unit
    @pytest.mark.parametrize("observable", list(Observable))
    @pytest.mark.parametrize("target", [
        GaussianTarget([-5.0], [[0.25]]),
        GaussianTarget([0.7], [[1.3]]),
        GaussianMixtureTarget.symmetric(2.0, 0.8),
    ])
    def test_closed_form_matches_quadrature(self, target, observable):
        assert target.exact_expectation(observable) == pytest.approx(
            quadrature_expectation(target, observable), rel=1e-7, abs=1e-6)

    @pytest.mark.unit
    def test_monte_carlo_with_standard_error(self):
        target = GaussianTarget([1.0, 0.0], np.eye(2))
        estimate, stderr = monte_carlo_expectation(target, Observable.MEAN, 100_000, make_rng(3))
        assert 0 < stderr < 0.01
        assert abs(estimate - 1.0) < 5 * stderr

    @pytest.mark.unit
    def test_truth_falls_back_to_monte_carlo(self):
        target = GaussianTarget([1.0, 0.0], np.eye(2))
        assert expectation_truth(target, Observable.MEAN, make_rng(0), n=50_000) == pytest.approx(1.0, abs=0.03)


class TestInitial:
    @pytest.mark.unit
    def test_sampling_is_deterministic(self):
        init = GaussianInitial(np.zeros(2), np.eye(2), Phi0.linear([0.0, 0.0]))
        assert_array_equal(sample_initial(init, 50, make_rng(7)), sample_initial(init, 50, make_rng(7)))

    @pytest.mark.unit
    def test_sample_mean(self, initial_law):
        x = initial_law.sample(100_000, make_rng(11))
        assert x.shape == (100_000, 1)
        assert abs(x.mean() - 2.0) < 3 * 2.0 / math.sqrt(100_000)

    @pytest.mark.unit
    def test_zero_particles_rejected(self, initial_law):
        with pytest.raises(UsageError):
            sample_initial(initial_law, 0, make_rng(0))

    @pytest.mark.unit
    def test_linear_phi0_momentum(self, initial_law):
        x = np.array([[-3.0], [0.0], [7.5]])
        assert_array_equal(initial_momentum(initial_law, x), np.full((3, 1), 0.5))

    @pytest.mark.unit
    def test_quadratic_phi0_momentum(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        identity = GaussianInitial(np.zeros(2), np.eye(2), Phi0.quadratic(np.eye(2)))
        zero = GaussianInitial(np.zeros(2), np.eye(2), Phi0.quadratic(np.zeros((2, 2))))
        assert_array_equal(identity.initial_momentum(x), x)
        assert_array_equal(zero.initial_momentum(x), np.zeros_like(x))

    @pytest.mark.unit
    def test_non_convex_phi0_rejected(self):
        with pytest.raises(UsageError):
            Phi0.quadratic(np.diag([1.0, -1.0]))


@pytest.mark.unit
def test_derived_seeds_are_reproducible_and_distinct():
    seeds = derive_seeds(42, 100)
    assert seeds == derive_seeds(42, 100)
    assert len(set(seeds)) == 100
    assert seeds[:10] == derive_seeds(42, 10)
    assert seeds != derive_seeds(43, 100)


@pytest.mark.unit
def test_rng_streams_are_independent():
    a = make_rng(5, 0).standard_normal(10)
    b = make_rng(5, 1).standard_normal(10)
    assert not np.allclose(a, b)
    assert_array_equal(a, make_rng(5, 0).standard_normal(10))
