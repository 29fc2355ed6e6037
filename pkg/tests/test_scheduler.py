import numpy as np
from hydra.test import Test
from scipy.integrate import quad

from dflow.flow import DegenerateScheduler, Scheduler


def _cond_ot_custom() -> Scheduler:
    return Scheduler.custom(
        alpha=lambda t: t,
        sigma=lambda t: 1.0 - t,
        alpha_dot=lambda t: 0.0 * t + 1.0,
        sigma_dot=lambda t: 0.0 * t - 1.0,
    )


@Test.register()
class SchedulerTest(Test):

    def test_0_cond_ot_coefficients(self):
        s = Scheduler.cond_ot()
        a, b = s.coeffs(0.3)
        self.assertAlmostEqual(a, -1.0 / 0.7, places=14)
        self.assertAlmostEqual(b, 1.0 + 0.3 / 0.7, places=14)
        self.assertAlmostEqual(s.snr(0.5), 1.0, places=14)

    def test_1_gamma_is_half_snr_derivative(self):
        h = 1e-6

        for s in (Scheduler.cond_ot(), Scheduler.vp()):
            for t in (0.1, 0.5, 0.9):
                fd = 0.5 * (s.snr(t + h) - s.snr(t - h)) / (2.0 * h)
                self.assertLess(abs(s.gamma(t) - fd) / abs(fd), 1e-5, f"{s.kind.value} t={t}")

    def test_2_custom_gamma_by_difference(self):
        custom = _cond_ot_custom()
        exact = Scheduler.cond_ot()

        for t in (0.2, 0.6, 0.95):
            self.assertLess(abs(custom.gamma(t) - exact.gamma(t)) / exact.gamma(t), 1e-5)

        self.assertLess(abs(custom.gamma(0.0)), 1e-5)

    def test_3_clamp_keeps_sigma_positive(self):
        s = Scheduler.cond_ot()
        alpha, sigma = s.kernel(1.0)
        self.assertAlmostEqual(alpha, s.t_max)
        self.assertAlmostEqual(sigma, 1e-3, places=12)
        self.assertGreater(Scheduler.vp().kernel(1.0)[1], 0.0)
        self.assertAlmostEqual(s.sigma_max(), 1e-3, places=12)

        with self.assertRaises(DegenerateScheduler):
            Scheduler.cond_ot(t_max=1.0).kernel(1.0)

    def test_4_epsilon_velocity_round_trip(self):
        rng = np.random.default_rng(0)

        for s in (Scheduler.cond_ot(), Scheduler.vp()):
            for _ in range(100):
                t = rng.uniform(1e-3, 1.0 - 1e-3)
                x = rng.standard_normal(3)
                u = rng.standard_normal(3)
                back = s.velocity_from_epsilon(t, x, s.epsilon_from_velocity(t, x, u))
                self.assertLessEqual(np.linalg.norm(back - u) / np.linalg.norm(u), 1e-12)

    def test_5_cond_ot_epsilon_matches_linear_form(self):
        s = Scheduler.cond_ot()
        x = np.array([0.4, -1.2])
        u = np.array([1.0, 0.5])
        t = 0.25
        # u = (x - eps) / t
        eps = s.epsilon_from_velocity(t, x, u)
        np.testing.assert_allclose(eps, x - t * u, rtol=1e-12)

    def test_6_denoiser_velocity_round_trip(self):
        s = Scheduler.vp()
        x = np.array([0.3, 0.1, -0.7])
        x1 = np.array([1.0, -2.0, 0.5])
        u = s.velocity_from_denoiser(0.4, x, x1)
        np.testing.assert_allclose(s.denoiser_from_velocity(0.4, x, u), x1, rtol=1e-12)

    def test_7_variance_preserving(self):
        s = Scheduler.vp()
        t = np.linspace(0.0, s.t_max, 11)
        alpha, sigma = s.kernel(t)
        np.testing.assert_allclose(alpha ** 2 + sigma ** 2, 1.0, rtol=1e-14)

    def test_8_invalid_schedulers(self):
        with self.assertRaises(ValueError):
            Scheduler.cond_ot(t_max=1.5)

        with self.assertRaises(ValueError):
            Scheduler.cond_ot(t_min=0.999)

        with self.assertRaises(ValueError):
            Scheduler.by_name("custom")

        self.assertEqual(Scheduler.by_name("vp").kind, Scheduler.Kind.VP)

    def test_9_gamma_equals_b_alpha_over_sigma_squared(self):
        rng = np.random.default_rng(7)

        for s in (Scheduler.cond_ot(), Scheduler.vp()):
            for t in rng.uniform(0.01, 0.99, 100):
                _, b = s.coeffs(t)
                alpha, sigma = s.kernel(t)
                expect = b * alpha / sigma ** 2
                self.assertLessEqual(abs(s.gamma(t) - expect) / abs(expect), 1e-8, f"{s.kind.value} t={t}")

    def test_10_log_sigma_ratio_integrates_a(self):
        for s in (Scheduler.cond_ot(), Scheduler.vp()):
            total, _ = quad(lambda t: s.coeffs(t)[0], 0.0, s.t_max, limit=200, epsabs=1e-12)
            self.assertLessEqual(abs(total - s.log_sigma_ratio()), 1e-6, s.kind.value)

        self.assertAlmostEqual(Scheduler.cond_ot().log_sigma_ratio(), np.log(1e-3), places=10)

    def test_11_derivatives_match_differences(self):
        h = 1e-4

        for s in (Scheduler.cond_ot(), Scheduler.vp()):
            for t in np.linspace(0.05, 0.95, 19):
                fd_alpha = (s.alpha(t + h) - s.alpha(t - h)) / (2.0 * h)
                fd_sigma = (s.sigma(t + h) - s.sigma(t - h)) / (2.0 * h)
                self.assertLessEqual(abs(s.alpha_dot(t) - fd_alpha), 10.0 * h ** 2)
                self.assertLessEqual(abs(s.sigma_dot(t) - fd_sigma), 10.0 * h ** 2)
