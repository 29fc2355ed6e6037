"""Verification suites: Jacobian closed form, gradient-route agreement, solver order.

Each suite returns Check rows; a check with a tolerance gates the suite, one
without is recorded for the report only.
"""
from typing import Callable, Dict, Iterable, List

import numpy as np
from attrdict import AttrDict
from hydra import log

from ..flow.base import FlowError
from ..flow.prior import FlowField, TargetPrior
from ..flow.scheduler import Scheduler
from ..flow.sensitivity import (
    grad_continuous, grad_discrete, grad_finite_difference,
    jacobian_closed_form, jacobian_finite_difference, ordered_product, variation,
)
from ..flow.solver import Scheme, solve_forward
from ..schemas import Check, VerificationSummary, VerifySection
from .recipes import make_field

__all__ = "SUITES", "suite_theorem1", "suite_routes", "suite_order", "verify", "relative_error"

ORDER_STEPS = {Scheme.EULER: 256, Scheme.MIDPOINT: 64, Scheme.RK4: 32}
ORDER_BANDS = {Scheme.EULER: (1.8, 2.2), Scheme.MIDPOINT: (3.5, 4.5), Scheme.RK4: (14.0, 18.0)}
ORDER_X0 = (0.8, 0.3)
EXACT_TOL = 1e-10
COMMUTING_TOL = 1e-8
VARIATION_TRIALS = 10
VARIATION_STEP = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(float(np.linalg.norm(b)), 1e-300))


def _gate(suite: str, name: str, value: float, tol: float, detail: str = "") -> Check:
    return Check(suite=suite, name=name, value=value, tolerance=tol, passed=bool(value <= tol), detail=detail)


def _record(suite: str, name: str, value: float, detail: str = "") -> Check:
    return Check(suite=suite, name=name, value=value, detail=detail)


def suite_theorem1(field: FlowField, cfg: VerifySection, seed: int) -> List[Check]:
    rng = np.random.default_rng([seed, 11])
    n = cfg.n_steps
    checks = []

    point = FlowField(TargetPrior.empirical(np.zeros((1, 2))), Scheduler.cond_ot())
    traj = solve_forward(point, rng.standard_normal(2), n)
    jac = jacobian_closed_form(point, traj, tol=1e-12).jacobian
    expect = point.scheduler.sigma_max() * np.eye(2)
    checks.append(_gate("theorem1", "single_point closed form = sigma I", float(np.max(np.abs(jac - expect))), EXACT_TOL))

    for d in (1, 2):
        gauss = FlowField(TargetPrior.standard_normal(d), Scheduler.cond_ot(t_max=1.0 - 1e-3))
        x0 = rng.standard_normal(d)
        traj = solve_forward(gauss, x0, n)
        closed = jacobian_closed_form(gauss, traj).jacobian
        fd = jacobian_finite_difference(gauss, x0, n, h=cfg.jacobian_fd_step).jacobian
        checks.append(_gate("theorem1", f"standard_normal d={d} closed form vs fd", relative_error(closed, fd), cfg.closed_form_tol))
        checks.append(_gate("theorem1", f"standard_normal d={d} product vs single", relative_error(ordered_product(gauss, traj), closed), COMMUTING_TOL))

    iso = FlowField(TargetPrior.gaussian(np.zeros(2), np.eye(2)), Scheduler.cond_ot())
    x0 = rng.standard_normal(2)
    traj = solve_forward(iso, x0, n)
    jac = jacobian_closed_form(iso, traj).jacobian
    worst = 0.0

    for _ in range(VARIATION_TRIALS):
        g = rng.standard_normal(2)
        step = grad_discrete(iso, lambda _: g, x0, n, trajectory=traj).grad_x0
        h = VARIATION_STEP
        lo = solve_forward(iso, x0 + h * step, n, store=False).terminal
        hi = solve_forward(iso, x0 - h * step, n, store=False).terminal
        worst = max(worst, relative_error(variation(iso, traj, g, jac), (hi - lo) / (2.0 * h)))

    checks.append(_gate("theorem1", "variation vs numerical", worst, cfg.closed_form_tol))

    for t_max in cfg.t_max_sweep:
        swept = FlowField(field.prior, Scheduler.by_name(field.scheduler.kind, t_max=t_max, t_min=field.scheduler.t_min))
        x0 = np.random.default_rng([seed, 12]).standard_normal(field.dim)
        traj = solve_forward(swept, x0, n)

        try:
            closed = jacobian_closed_form(swept, traj).jacobian
            product = ordered_product(swept, traj)
        except FlowError as exc:
            checks.append(_record("theorem1", f"t_max={t_max} closed form", float("nan"), detail=str(exc)))
            continue

        fd = jacobian_finite_difference(swept, x0, n, h=cfg.jacobian_fd_step).jacobian
        checks.append(_record("theorem1", f"t_max={t_max} single vs product", relative_error(closed, product)))
        checks.append(_record("theorem1", f"t_max={t_max} single vs fd", relative_error(closed, fd)))
        checks.append(_record("theorem1", f"t_max={t_max} product vs fd", relative_error(product, fd)))

    return checks


def suite_routes(field: FlowField, cfg: VerifySection, seed: int) -> List[Check]:
    rng = np.random.default_rng([seed, 21])
    n = cfg.n_steps
    fd_worst = cont_worst = 0.0

    for _ in range(cfg.trials):
        x0 = rng.standard_normal(field.dim)
        y = rng.standard_normal(field.dim)
        traj = solve_forward(field, x0, n)

        def cost_grad(x1, y=y):
            return 2.0 * (x1 - y)

        def cost(x1, y=y):
            return float(np.sum((x1 - y) ** 2))

        discrete = grad_discrete(field, cost_grad, x0, n, trajectory=traj).grad_x0
        continuous = grad_continuous(field, cost_grad, x0, n, trajectory=traj).grad_x0
        fd = grad_finite_difference(field, cost, x0, n, h=cfg.fd_step).grad_x0

        fd_worst = max(fd_worst, relative_error(discrete, fd))
        cont_worst = max(cont_worst, relative_error(discrete, continuous))

    return [
        _gate("routes", f"discrete vs fd ({cfg.trials} trials)", fd_worst, cfg.fd_tol),
        _gate("routes", f"discrete vs continuous ({cfg.trials} trials)", cont_worst, cfg.route_tol),
    ]


def suite_order(field: FlowField, cfg: VerifySection, seed: int) -> List[Check]:
    x0 = np.array(ORDER_X0) if field.dim == 2 else np.random.default_rng([seed, 31]).standard_normal(field.dim)
    reference = solve_forward(field, x0, cfg.order_reference_steps, Scheme.RK4, store=False).terminal
    checks = []

    for scheme, n in ORDER_STEPS.items():
        coarse = np.linalg.norm(solve_forward(field, x0, n, scheme, store=False).terminal - reference)
        fine = np.linalg.norm(solve_forward(field, x0, 2 * n, scheme, store=False).terminal - reference)
        ratio = float(coarse / max(fine, 1e-300))
        lo, hi = ORDER_BANDS[scheme]
        checks.append(Check(
            suite="order",
            name=f"{scheme.value} error ratio n={n}",
            value=ratio,
            passed=bool(lo <= ratio <= hi),
            detail=f"band [{lo}, {hi}], observed order {np.log2(ratio):.2f} of {scheme.order}, errors {coarse:.3e} / {fine:.3e}",
        ))

    return checks


SUITES: Dict[str, Callable[[FlowField, VerifySection, int], List[Check]]] = {
    "theorem1": suite_theorem1,
    "routes": suite_routes,
    "order": suite_order,
}


def verify(conf: AttrDict, suites: Iterable[str], seed: int) -> VerificationSummary:
    field = make_field(conf)
    summary = VerificationSummary(name=conf.experiment.name)

    for name in suites:
        if name not in SUITES:
            raise ValueError(f"Unknown verification suite {name!r} (expected one of {', '.join(SUITES)}).")

        checks = SUITES[name](field, conf.verify, seed)
        failed = sum(1 for c in checks if c.passed is False)
        log.info(f"verify: {name}: {len(checks)} checks, {failed} failed")
        summary.checks.extend(checks)

    return summary
