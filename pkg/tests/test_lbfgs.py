import numpy as np
from hydra.test import Test

from dflow.flow import LineSearchFailure
from dflow.opt import LBFGS, Evaluator, LineSearch, LineSearchParams, minimize

A = np.diag([1.0, 10.0])


def quadratic(x):
    return 0.5 * float(x @ A @ x), A @ x


def rosenbrock(x):
    a, b = x
    f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    g = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return f, g


def flat(x):
    return 1.0, np.ones_like(x)


@Test.register()
class LBFGSTest(Test):

    def test_0_quadratic(self):
        res = minimize(quadratic, np.array([3.0, -2.0]), grad_tol=1e-10)
        self.assertTrue(res.converged)
        self.assertLessEqual(res.iterations, 10)
        self.assertLessEqual(float(np.linalg.norm(res.g)), 1e-10)
        np.testing.assert_allclose(res.x, 0.0, atol=1e-10)

    def test_1_rosenbrock(self):
        res = minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=500, grad_tol=1e-8)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-4)

    def test_2_backtracking(self):
        params = LineSearchParams(kind=LineSearch.BACKTRACKING)
        res = minimize(quadratic, np.array([3.0, -2.0]), params=params, max_iters=500, grad_tol=1e-8)
        self.assertTrue(res.converged)
        np.testing.assert_allclose(res.x, 0.0, atol=1e-7)

    def test_3_two_loop_is_newton_in_one_dimension(self):
        solver = LBFGS(history=3)
        self.assertTrue(solver.update(np.array([0.5]), np.array([2.0])))
        np.testing.assert_allclose(solver.direction(np.array([4.0])), [-1.0])

    def test_4_first_direction_is_capped(self):
        d = LBFGS().direction(np.array([3.0, 4.0]))
        np.testing.assert_allclose(d, [-0.6, -0.8])
        np.testing.assert_allclose(LBFGS().direction(np.array([0.1, 0.0])), [-0.1, 0.0])

    def test_5_skips_bad_curvature(self):
        solver = LBFGS(history=2)
        self.assertFalse(solver.update(np.array([1.0, 0.0]), np.array([-1.0, 0.0])))
        self.assertEqual(len(solver.pairs), 0)

        for i in range(4):
            solver.update(np.array([1.0, float(i)]), np.array([1.0, 0.0]))

        self.assertEqual(len(solver.pairs), 2)
        solver.reset()
        self.assertEqual(len(solver.pairs), 0)

    def test_6_params(self):
        with self.assertRaises(ValueError):
            LineSearchParams(c1=0.9, c2=0.5)

        with self.assertRaises(ValueError):
            LineSearchParams(rho=1.0)

        with self.assertRaises(ValueError):
            LineSearchParams(max_step=0.0)

        with self.assertRaises(ValueError):
            LBFGS(history=0)

    def test_7_line_search_failure(self):
        x = np.array([1.0, 2.0])

        for kind in LineSearch:
            solver = LBFGS(params=LineSearchParams(kind=kind))
            f, g = flat(x)

            with self.assertRaises(LineSearchFailure):
                solver.step(Evaluator(flat), x, f, g)

        res = minimize(flat, x)
        self.assertFalse(res.converged)
        self.assertEqual(res.iterations, 0)

    def test_8_evaluator_memoizes(self):
        calls = []

        def fun(x):
            calls.append(x.copy())
            return quadratic(x)

        ev = Evaluator(fun)
        x = np.array([1.0, 1.0])
        self.assertEqual(ev.value(x), 5.5)
        np.testing.assert_array_equal(ev.grad(x), [1.0, 10.0])
        self.assertEqual(ev.count, 1)
        ev(np.array([1.0, 2.0]))
        self.assertEqual(len(calls), 2)

    def test_9_step_bound(self):
        for kind in LineSearch:
            solver = LBFGS(params=LineSearchParams(kind=kind, max_step=0.5))
            ev = Evaluator(quadratic)
            x = np.array([30.0, -20.0])
            f, g = ev(x)

            for _ in range(6):
                res = solver.step(ev, x, f, g)
                self.assertLessEqual(res.step, 0.5 + 1e-12)
                self.assertLessEqual(float(np.linalg.norm(res.x - x)), 0.5 + 1e-12)
                self.assertLess(res.f, f)
                x, f, g = res.x, res.f, res.g

        np.testing.assert_allclose(LineSearchParams(max_step=2.0).first_step(np.array([3.0, 4.0])), 0.4)
        self.assertEqual(LineSearchParams(max_step=2.0).first_step(np.array([0.3, 0.4])), 1.0)
        self.assertEqual(LineSearchParams().first_step(np.array([300.0, 400.0])), 1.0)
