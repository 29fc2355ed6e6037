import numpy as np
from deepdiff import DeepDiff
from hydra.test import Test

from dflow.flow import FlowField, NonFiniteState, Scheduler, TargetPrior, grad_discrete, solve_backward, solve_forward
from dflow.harness.recipes import two_gaussians
from dflow.opt import CorruptionOp, CostSpec, LevelFunction, Regularizer
from dflow.opt.optimize import init_blend, init_noise, init_source, optimize, resolve_target, unit_rms
from dflow.schemas import OptimizerConfig, StopReason


@Test.register()
class OptimizeTest(Test):

    def setUp(self):
        self.field = FlowField(two_gaussians(), Scheduler.cond_ot())

    def test_0_init_noise(self):
        np.testing.assert_array_equal(init_noise(3, 5), np.random.default_rng(5).standard_normal(3))
        self.assertFalse(np.array_equal(init_noise(3, 5), init_noise(3, 6)))

    def test_1_init_blend(self):
        y = np.array([2.0, 0.1])
        np.testing.assert_array_equal(init_blend(self.field, y, 0.0, 1, 10), init_noise(2, 1))
        back = solve_backward(self.field, y, 10, store=False).terminal
        np.testing.assert_allclose(init_blend(self.field, y, 1.0, 1, 10), back)

        with self.assertRaises(ValueError):
            init_blend(self.field, y, 1.5, 1, 10)

        scaled = init_blend(self.field, y, 1.0, 1, 10, unit_variance=True)
        np.testing.assert_allclose(scaled, back * np.sqrt(2.0) / np.linalg.norm(back))

    def test_2_init_source(self):
        keep = np.array([True, False])
        spec = CostSpec(CostSpec.Kind.RECONSTRUCTION, y=[2.0], corruption=CorruptionOp.mask(keep))
        cfg = OptimizerConfig(seed=4)
        expect = init_blend(self.field, np.array([2.0, 2.0]), 0.1, 4, 10, unit_variance=True)
        np.testing.assert_allclose(init_source(self.field, spec, cfg, 10), expect)

        sampling = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=[2.0, 0.0])
        np.testing.assert_array_equal(init_source(self.field, sampling, cfg, 10), init_noise(2, 4))

        level = CostSpec(CostSpec.Kind.LEVEL_SET, level=LevelFunction(LevelFunction.Kind.SQNORM))

        with self.assertRaises(ValueError):
            init_source(self.field, level, cfg.copy(update={"init": "blend"}), 10)

    def test_3_resolve_target(self):
        spec = CostSpec(CostSpec.Kind.NEG_PSNR, y=[0.0, 1.0], corruption=CorruptionOp.identity(2, noise_sigma=0.1))
        self.assertIsNone(resolve_target(spec, None))
        self.assertAlmostEqual(resolve_target(spec, "noise"), 20.0, places=10)
        self.assertEqual(resolve_target(spec, 25), 25.0)

    def test_4_reversed_sampling(self):
        n = 10
        y = solve_forward(self.field, np.array([0.7, -0.4]), n, store=False).terminal
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=y)
        cfg = OptimizerConfig(target_value=1e-10, max_outer_iters=20)
        report = optimize(self.field, spec, cfg, init_noise(2, 0), n)

        self.assertLessEqual(report.final_value, 1e-4)
        self.assertIn(report.stop_reason, (StopReason.TARGET_REACHED, StopReason.GRAD_TOL))
        self.assertEqual(report.iterates[0].iteration, 0)
        np.testing.assert_allclose(report.final_x1, solve_forward(self.field, np.array(report.final_x0), n).terminal)

    def test_5_single_point_stops_on_gradient(self):
        field = FlowField(TargetPrior.empirical(np.zeros((1, 2))), Scheduler.cond_ot())
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=np.zeros(2))
        report = optimize(field, spec, OptimizerConfig(grad_tol=1e-4), np.array([1.0, -1.0]), 20)

        self.assertEqual(report.stop_reason, StopReason.GRAD_TOL)
        self.assertEqual(report.final_x0, [1.0, -1.0])

    def test_6_level_set(self):
        spec = CostSpec(CostSpec.Kind.LEVEL_SET, level=LevelFunction(LevelFunction.Kind.SQNORM), level_target=1.0)
        report = optimize(self.field, spec, OptimizerConfig(target_value=1e-12), init_noise(2, 2), 10)

        self.assertLess(report.final_value, 1e-6)
        self.assertAlmostEqual(float(np.dot(report.final_x1, report.final_x1)), 1.0, places=3)

    def test_7_monotone_and_deterministic(self):
        keep = np.array([True, False, True, False])
        field = FlowField(two_gaussians(dim=4), Scheduler.cond_ot())
        y = np.array([1.5, -0.2])
        spec = CostSpec(CostSpec.Kind.RECONSTRUCTION, y=y, corruption=CorruptionOp.mask(keep))
        cfg = OptimizerConfig(max_outer_iters=5, inner_iters_per_step=3, seed=9)
        x0 = init_source(field, spec, cfg, 8)

        first = optimize(field, spec, cfg, x0, 8)
        second = optimize(field, spec, cfg, x0, 8)
        values = [it.value for it in first.iterates]

        for before, after in zip(values, values[1:]):
            self.assertLessEqual(after, before)

        self.assertEqual(len(first.iterates[-1].x1), 4)
        self.assertIsNotNone(first.final_psnr)
        self.assertFalse(DeepDiff(first.dict(), second.dict(), exclude_paths=["root['wall_time']"]))

    def test_8_renormalize(self):
        field = FlowField(two_gaussians(dim=4), Scheduler.cond_ot())
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=np.array([3.0, 1.0, -1.0, 0.5]))
        cfg = OptimizerConfig(max_outer_iters=2, inner_iters_per_step=2, grad_tol=0.0, renormalize=True)
        report = optimize(field, spec, cfg, init_noise(4, 3), 6)

        self.assertEqual(report.stop_reason, StopReason.MAX_ITERS)
        x0 = np.array(report.final_x0)
        self.assertAlmostEqual(float(x0.mean()), 0.0, places=10)
        self.assertAlmostEqual(float(x0.std()), 1.0, places=10)

    def test_9_target_nll_regularizer(self):
        y = np.array([1.0, 0.3])
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=y, regularizers=[Regularizer(Regularizer.Kind.TARGET_NLL, 0.1)])
        report = optimize(self.field, spec, OptimizerConfig(max_outer_iters=2, inner_iters_per_step=3), init_noise(2, 1), 10)
        values = [it.value for it in report.iterates]
        self.assertLessEqual(values[-1], values[0])

    def test_10_non_finite_state(self):
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=np.zeros(2))

        with np.errstate(all="ignore"), self.assertRaises(NonFiniteState):
            optimize(self.field, spec, OptimizerConfig(), np.array([np.nan, 0.0]), 5)

    def test_11_source_step_follows_prior_geometry(self):
        # One step on x0 moves x(1) by J J^T of the data-space step, not along it.
        field = FlowField(TargetPrior.gaussian(np.zeros(2), np.diag([4.0, 0.01])), Scheduler.cond_ot())
        y, eta, n = np.array([1.0, 1.0]), 0.1, 100
        x0 = np.zeros(2)

        grad = grad_discrete(field, lambda x1: 2.0 * (x1 - y), x0, n).grad_x0
        moved = solve_forward(field, x0 - eta * grad, n, store=False).terminal
        direct = -eta * 2.0 * (np.zeros(2) - y)

        self.assertAlmostEqual(direct[0] / direct[1], 1.0)
        self.assertGreater(moved[0] / moved[1], 100.0)

        scale = np.sqrt(0.998 * np.array([4.0, 0.01]) + 1e-6)
        np.testing.assert_allclose(moved, eta * 2.0 * scale ** 2 * y, rtol=1e-2)

    def test_12_iterates_stay_near_the_prior(self):
        var = np.array([4.0, 0.01])
        field = FlowField(TargetPrior.gaussian(np.zeros(2), np.diag(var)), Scheduler.cond_ot())
        y, eta, n = np.array([1.0, 1.0]), 0.1, 50
        x0 = np.zeros(2)

        def mahalanobis(x1):
            return float(np.sqrt(np.sum(x1 ** 2 / var)))

        for _ in range(30):
            grad = grad_discrete(field, lambda x1: 2.0 * (x1 - y), x0, n).grad_x0
            x0 = x0 - eta * grad
            x1 = solve_forward(field, x0, n, store=False).terminal
            cost = float(np.sum((x1 - y) ** 2))

            # Descent on x(1) itself runs straight from 0 to y.
            direct = (1.0 - np.sqrt(cost / 2.0)) * y
            self.assertLess(mahalanobis(x1), mahalanobis(direct))

    def test_13_init_noise_statistics(self):
        self.assertLess(abs(float(init_noise(100000, 7).mean())), 1e-2)
        norms = np.array([np.linalg.norm(init_noise(100, seed)) for seed in range(200)])
        self.assertLess(abs(float(norms.mean()) - 10.0), 0.2)
        self.assertTrue(np.all(np.abs(norms - 10.0) <= 3.0))

    def test_14_blend_preserves_variance(self):
        field = FlowField(two_gaussians(dim=4), Scheduler.cond_ot())
        y = np.array([9.0, -3.0, 0.5, 4.0])
        back = solve_backward(field, y, 4, store=False).terminal
        np.testing.assert_allclose(np.linalg.norm(unit_rms(back)), 2.0)
        np.testing.assert_array_equal(unit_rms(np.zeros(3)), np.zeros(3))

        draws = np.array([init_blend(field, y, 0.1, seed, 4, unit_variance=True) for seed in range(2000)])
        self.assertAlmostEqual(float(np.mean(np.sum(draws ** 2, axis=1))) / 4.0, 1.0, delta=0.05)
        np.testing.assert_allclose(draws.mean(axis=0), np.sqrt(0.1) * unit_rms(back), atol=0.1)

    def test_15_target_checked_after_outer_iteration(self):
        n = 10
        y = solve_forward(self.field, np.array([0.7, -0.4]), n, store=False).terminal
        x0 = init_noise(2, 0)
        start = float(np.sum((solve_forward(self.field, x0, n, store=False).terminal - y) ** 2))
        spec = CostSpec(CostSpec.Kind.REVERSED_SAMPLING, y=y)

        cfg = OptimizerConfig(max_outer_iters=1, inner_iters_per_step=5, grad_tol=0.0)
        plain = optimize(self.field, spec, cfg, x0, n)
        early = optimize(self.field, spec, cfg.copy(update={"target_value": 0.5 * start, "max_outer_iters": 5}), x0, n)

        self.assertEqual(plain.stop_reason, StopReason.MAX_ITERS)
        self.assertEqual(early.stop_reason, StopReason.TARGET_REACHED)
        self.assertEqual(len(early.iterates), 2)
        np.testing.assert_array_equal(early.final_x0, plain.final_x0)

    def test_16_level_set_lands_near_a_mode(self):
        spec = CostSpec(CostSpec.Kind.LEVEL_SET, level=LevelFunction(LevelFunction.Kind.SQNORM), level_target=2.0)
        modes = self.field.prior.points

        for seed in range(4):
            report = optimize(self.field, spec, OptimizerConfig(target_value=1e-6), init_noise(2, seed), 20)
            x1 = np.array(report.final_x1)

            self.assertLessEqual(abs(float(x1 @ x1) - 2.0), 1e-3)
            self.assertLessEqual(float(np.min(np.linalg.norm(modes - x1, axis=1))), 3 * 0.5)
