import numpy as np
from hydra.test import Test
from scipy.integrate import trapezoid

from dflow.flow import (
    DimensionMismatch, FlowField, NonFiniteState, NumericalUnderflow, Scheduler, TargetPrior,
    divergence, epsilon_from_velocity, posterior, velocity, velocity_from_epsilon, velocity_jacobian,
)
from dflow.harness.recipes import two_gaussians


@Test.register()
class PriorTest(Test):

    def test_0_weights_and_variances_validated(self):
        with self.assertRaises(ValueError):
            TargetPrior.empirical(np.zeros((2, 2)), weights=[0.5, 0.6])

        with self.assertRaises(ValueError):
            TargetPrior.mixture(np.zeros((1, 2)), 0.0)

        with self.assertRaises(DimensionMismatch):
            TargetPrior.empirical(np.zeros((3, 2)), weights=[1.0])

        with self.assertRaises(ValueError):
            TargetPrior.gaussian(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_1_gaussian_matches_single_component_mixture(self):
        s = 0.7
        mean = np.array([0.5, -1.0])
        mix = TargetPrior.mixture(mean[None], s ** 2)
        gauss = TargetPrior.gaussian(mean, s ** 2 * np.eye(2))
        x = np.array([[0.3, 0.2], [-1.5, 2.0]])

        for alpha, sigma in ((0.2, 0.8), (0.9, 0.1)):
            a = mix.posterior_batch(alpha, sigma, x)
            b = gauss.posterior_batch(alpha, sigma, x)
            np.testing.assert_allclose(a.denoiser, b.denoiser, atol=1e-12)
            np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-12)
            np.testing.assert_allclose(a.log_marginal, b.log_marginal, atol=1e-12)

            expect = mean + (alpha * s ** 2 / (alpha ** 2 * s ** 2 + sigma ** 2)) * (x - alpha * mean)
            np.testing.assert_allclose(a.denoiser, expect, atol=1e-12)

    def test_2_single_point_posterior(self):
        prior = TargetPrior.empirical([[1.0, -2.0]])
        stats = prior.posterior_batch(0.5, 0.5, np.array([3.0, 3.0])).item()
        np.testing.assert_allclose(stats.denoiser, [1.0, -2.0])
        np.testing.assert_allclose(stats.covariance, np.zeros((2, 2)), atol=1e-15)
        self.assertEqual(stats.variance_trace, 0.0)

    def test_3_velocity_jacobian_by_differences(self):
        field = FlowField(two_gaussians(), Scheduler.cond_ot())
        x = np.array([0.4, -0.3])
        h = 1e-6

        for t in (0.2, 0.5, 0.8):
            fd = np.array([
                (field.velocity(t, x + h * e) - field.velocity(t, x - h * e)) / (2.0 * h)
                for e in np.eye(2)
            ]).T
            np.testing.assert_allclose(field.velocity_jacobian(t, x), fd, atol=1e-6)
            self.assertAlmostEqual(field.divergence(t, x), float(np.trace(fd)), places=6)

    def test_4_score_is_gradient_of_log_density(self):
        field = FlowField(two_gaussians(), Scheduler.vp())
        x = np.array([1.1, 0.2])
        h = 1e-6
        t = 0.6
        fd = np.array([(field.log_density(t, x + h * e) - field.log_density(t, x - h * e)) / (2.0 * h) for e in np.eye(2)])
        np.testing.assert_allclose(field.score(t, x), fd, atol=1e-6)

    def test_5_denoiser_approaches_rescaled_point(self):
        field = FlowField(two_gaussians(), Scheduler.cond_ot(t_max=1.0 - 1e-4))
        x = np.array([1.0, 0.5])

        for t in (0.9, 0.99, 0.999):
            alpha, sigma = field.scheduler.kernel(t)
            gap = np.linalg.norm(field.denoiser(t, x) - x / alpha) / sigma
            self.assertTrue(np.isfinite(gap))
            self.assertLess(gap, 10.0)

    def test_6_batch_matches_single_points(self):
        field = FlowField(two_gaussians(), Scheduler.cond_ot())
        xs = np.random.default_rng(1).standard_normal((5, 2))
        batch = field.velocity(0.4, xs)
        divs = field.divergence(0.4, xs)

        for i, x in enumerate(xs):
            np.testing.assert_allclose(batch[i], field.velocity(0.4, x), rtol=1e-13, atol=1e-15)
            self.assertAlmostEqual(divs[i], field.divergence(0.4, x), places=12)

    def test_7_sampling(self):
        rng = np.random.default_rng(2)
        points = np.array([[0.0, 1.0], [2.0, 3.0]])
        draws = TargetPrior.empirical(points).sample(rng, 50)
        self.assertEqual(draws.shape, (50, 2))
        self.assertTrue(all(any(np.array_equal(d, p) for p in points) for d in draws))

        gauss = TargetPrior.gaussian(np.zeros(2), np.diag([4.0, 0.01]))
        draws = gauss.sample(rng, 20000)
        np.testing.assert_allclose(draws.var(axis=0), [4.0, 0.01], rtol=0.05)

    def test_8_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            two_gaussians().posterior_batch(0.5, 0.5, np.zeros(3))

    def test_9_marginal_density_integrates_to_one(self):
        grid = np.linspace(-15.0, 15.0, 30001)

        for prior in (two_gaussians(dim=1), TargetPrior.standard_normal(1), TargetPrior.empirical([[-1.0], [0.5]])):
            field = FlowField(prior, Scheduler.cond_ot())

            for t in (0.1, 0.5, 0.9):
                mass = trapezoid(np.exp(field.log_density(t, grid[:, None])), grid)
                self.assertAlmostEqual(mass, 1.0, delta=1e-4, msg=f"{prior} t={t}")

    def test_10_score_at_random_points(self):
        field = FlowField(two_gaussians(), Scheduler.cond_ot())
        rng = np.random.default_rng(4)
        h = 1e-5

        for _ in range(20):
            t = rng.uniform(0.05, 0.9)
            x = 2.0 * rng.standard_normal(2)
            fd = np.array([(field.log_density(t, x + h * e) - field.log_density(t, x - h * e)) / (2.0 * h) for e in np.eye(2)])
            np.testing.assert_allclose(field.score(t, x), fd, rtol=1e-4, atol=1e-4)

    def test_11_module_level_operations(self):
        s = Scheduler.cond_ot()
        pair = TargetPrior.empirical([[-1.0, 0.0], [1.0, 0.0]])
        stats = posterior(pair, s, 0.5, np.zeros(2))
        np.testing.assert_allclose(stats.posterior_weights, [0.5, 0.5])
        np.testing.assert_allclose(stats.denoiser, [0.0, 0.0], atol=1e-15)

        point = TargetPrior.empirical([[1.0, 0.0]])
        np.testing.assert_allclose(velocity(point, s, 0.5, np.zeros(2)), [2.0, 0.0])
        np.testing.assert_allclose(velocity_jacobian(point, s, 0.5, np.array([0.3, 0.1])), -2.0 * np.eye(2))
        self.assertAlmostEqual(divergence(point, s, 0.5, np.array([0.3, 0.1])), -4.0)
        self.assertAlmostEqual(divergence(TargetPrior.standard_normal(1), s, 0.5, np.array([0.2])), 0.0, places=12)

        x, u = np.array([1.0, 0.0]), np.array([2.0, 0.0])
        eps = epsilon_from_velocity(s, 0.5, x, u)
        np.testing.assert_allclose(eps, [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(velocity_from_epsilon(s, 0.5, x, np.array([0.5, -1.0])), [1.0, 2.0])

    def test_12_field_epsilon_is_the_source_noise(self):
        x_star = np.array([1.0, -2.0])
        field = FlowField(TargetPrior.empirical([x_star]), Scheduler.cond_ot())
        x0 = np.array([0.4, 0.9])

        for t in (0.2, 0.5, 0.8):
            alpha, sigma = field.scheduler.kernel(t)
            x = sigma * x0 + alpha * x_star
            np.testing.assert_allclose(field.epsilon(t, x), (x - alpha * x_star) / sigma, rtol=1e-12)
            np.testing.assert_allclose(field.epsilon(t, x), x0, rtol=1e-12)

    def test_13_non_finite_query_is_not_underflow(self):
        prior = TargetPrior.empirical([[0.0, 0.0]])

        with self.assertRaises(NonFiniteState):
            prior.posterior_batch(0.5, 0.5, np.array([np.nan, 0.0]))

        with self.assertRaises(NonFiniteState):
            prior.posterior_batch(0.5, 0.5, np.array([np.inf, 0.0]))

        with np.errstate(all="ignore"), self.assertRaises(NumericalUnderflow):
            prior.posterior_batch(0.5, 0.5, np.array([1e200, 0.0]))
