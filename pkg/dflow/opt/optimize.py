"""Source-point optimization: minimize a terminal cost over x0 through the flow.
"""
from __future__ import annotations

import math
import time
from typing import Dict, Optional, Union

import numpy as np
from hydra import log

from ..flow.base import DimensionMismatch, LineSearchFailure, NonFiniteState
from ..flow.prior import FlowField
from ..flow.sensitivity import Route, grad_continuous, grad_discrete
from ..flow.solver import Scheme, solve_backward, solve_forward, solve_forward_with_logdensity
from ..schemas import IterateRecord, OptimizerConfig, RunReport, StopReason
from .lbfgs import LBFGS, Evaluator, LineSearchParams
from .objective import CostSpec, cost_and_grad, noise_psnr, psnr

__all__ = "BLEND_ALPHA", "init_noise", "unit_rms", "init_blend", "init_source", "resolve_target", "optimize"

BLEND_ALPHA = 0.1


def init_noise(d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(d)


def unit_rms(x: np.ndarray) -> np.ndarray:
    scale = float(np.linalg.norm(x))
    return x * (math.sqrt(x.size) / scale) if scale > 0.0 else x


def init_blend(field: FlowField, y_completed: np.ndarray, alpha: float, seed: int, n_steps: int,
               scheme: Scheme = Scheme.MIDPOINT, unit_variance: bool = False) -> np.ndarray:
    """sqrt(alpha) * y(0) + sqrt(1 - alpha) * z, y(0) the backward solve of y_completed.

    With unit_variance y(0) is first rescaled to norm sqrt(d), so the blend
    keeps the source's per-coordinate variance of one. Backward solves of
    points off the prior's support come back far outside that shell.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"Blend alpha must lie in [0, 1], got {alpha}.")

    z = init_noise(field.dim, seed)

    if alpha == 0.0:
        return z

    y0 = solve_backward(field, y_completed, n_steps, scheme, store=False).terminal

    if unit_variance:
        y0 = unit_rms(y0)

    return math.sqrt(alpha) * y0 + math.sqrt(1.0 - alpha) * z


def init_source(field: FlowField, spec: CostSpec, cfg: OptimizerConfig, n_steps: int,
                scheme: Scheme = Scheme.MIDPOINT, seed: Optional[int] = None) -> np.ndarray:
    """Initial x0 for cfg.init; 'auto' blends the lifted observation for inverse costs.
    """
    seed = cfg.seed if seed is None else seed
    init = cfg.init

    if init == "auto":
        init = "blend" if spec.is_inverse else "noise"

    if init == "noise":
        return init_noise(field.dim, seed)

    if spec.is_inverse:
        y_completed = spec.corruption.lift(spec.y)
    elif spec.y is not None:
        y_completed = spec.y
    else:
        raise ValueError(f"Blend initialization needs an observation; {spec.kind.value} has none.")

    alpha = cfg.blend_alpha

    if alpha is None:
        alpha = BLEND_ALPHA if spec.is_inverse else 0.0

    return init_blend(field, y_completed, alpha, seed, n_steps, scheme, unit_variance=cfg.blend_unit_variance)


def resolve_target(spec: CostSpec, target: Union[float, str, None]) -> Optional[float]:
    """Numeric stopping target; 'noise' is the PSNR of an observation at its noise level.
    """
    if target is None:
        return None

    if target == "noise":
        return noise_psnr(spec)

    return float(target)


def optimize(
        field: FlowField,
        spec: CostSpec,
        cfg: OptimizerConfig,
        x0_init: np.ndarray,
        n_steps: int,
        scheme: Scheme = Scheme.MIDPOINT,
        grad_route: Optional[Route] = None,
) -> RunReport:
    """Minimize spec's cost of x(1) = solve_forward(x0).terminal over x0.

    Each outer iteration runs up to cfg.inner_iters_per_step L-BFGS updates
    sharing one curvature history, then checks the target: a PSNR to reach for
    inverse costs, otherwise a cost value to get below. Accepted updates never
    raise the cost; with cfg.renormalize the standardized x0 replaces the
    iterate between outer iterations whatever its cost, so the recorded values
    may rise there.
    """
    route = Route(grad_route or cfg.grad_route)

    if route not in (Route.DISCRETE_ADJOINT, Route.CONTINUOUS_ADJOINT):
        raise ValueError(f"optimize needs an adjoint gradient route, got {route.value}.")

    x = np.array(x0_init, dtype=float).reshape(-1)

    if x.size != field.dim:
        raise DimensionMismatch(f"x0 has {x.size} coordinates, field has {field.dim}.")

    nll = spec.nll_weight
    target = resolve_target(spec, cfg.target_value)
    terminals: Dict[bytes, np.ndarray] = {}

    def objective(x0: np.ndarray):
        if nll > 0.0:
            trajectory = solve_forward_with_logdensity(field, x0, n_steps, scheme)
        else:
            trajectory = solve_forward(field, x0, n_steps, scheme)

        x1 = trajectory.terminal
        value, grad_x1, grad_x0 = cost_and_grad(spec, x1, x0, trajectory.terminal_log_density)

        if route == Route.DISCRETE_ADJOINT:
            sens = grad_discrete(field, lambda _: grad_x1, x0, n_steps, scheme, trajectory=trajectory, nll_weight=nll)
        else:
            sens = grad_continuous(field, lambda _: grad_x1, x0, n_steps, scheme, trajectory=trajectory, nll_weight=nll)

        terminals[x0.tobytes()] = x1

        if len(terminals) > 64:
            terminals.pop(next(iter(terminals)))

        return value, sens.grad_x0 + grad_x0

    def terminal(x0: np.ndarray) -> np.ndarray:
        key = np.ascontiguousarray(x0, dtype=float).tobytes()

        if key not in terminals:
            terminals[key] = solve_forward(field, x0, n_steps, scheme, store=False).terminal

        return terminals[key]

    def reached(value: float, x1: np.ndarray) -> bool:
        if target is None:
            return False

        if spec.is_inverse:
            return psnr(spec, x1) >= target

        return value <= target

    def record(iteration: int, step: float) -> IterateRecord:
        x1 = terminal(x)
        return IterateRecord(
            iteration=iteration,
            value=f,
            grad_norm=float(np.linalg.norm(g)),
            x0_norm=float(np.linalg.norm(x)),
            step=step,
            evaluations=evaluator.count,
            psnr=psnr(spec, x1) if spec.is_inverse else None,
            x1=x1.tolist(),
        )

    evaluator = Evaluator(objective)
    params = LineSearchParams(kind=cfg.line_search, c1=cfg.c1, c2=cfg.c2, rho=cfg.rho, max_step=cfg.max_step)
    solver = LBFGS(cfg.lbfgs_history, params)
    start = time.monotonic()

    try:
        f, g = evaluator(x)
        iterates = [record(0, 0.0)]
        stop = StopReason.TARGET_REACHED if reached(f, terminal(x)) else None

        for outer in range(1, cfg.max_outer_iters + 1):
            if stop is not None:
                break

            travelled = 0.0

            for _ in range(cfg.inner_iters_per_step):
                if float(np.linalg.norm(g)) < cfg.grad_tol:
                    stop = StopReason.GRAD_TOL
                    break

                try:
                    res = solver.step(evaluator, x, f, g)
                except LineSearchFailure as exc:
                    log.warning(f"optimize: outer {outer}: {exc}")
                    stop = StopReason.LINE_SEARCH_FAILURE
                    break

                x, f, g = res.x, res.f, res.g
                travelled += res.step

                if cfg.max_wall_time is not None and time.monotonic() - start > cfg.max_wall_time:
                    stop = StopReason.WALL_TIME
                    break

            if reached(f, terminal(x)):
                stop = StopReason.TARGET_REACHED

            if cfg.renormalize and stop is None:
                spread = float(np.std(x))

                if spread > 0.0:
                    x = (x - x.mean()) / spread
                    solver.reset()
                    f, g = evaluator(x)

            iterates.append(record(outer, travelled))
            log.debug(f"optimize: outer {outer} f={f:.6g} |g|={iterates[-1].grad_norm:.3g} |x0|={iterates[-1].x0_norm:.4g}")

        if stop is None:
            stop = StopReason.MAX_ITERS

    except NonFiniteState as exc:
        log.critical(f"optimize: aborted after {evaluator.count} evaluations", exc_info=exc)
        raise

    x1 = terminal(x)
    log.info(f"optimize: {stop.value} after {len(iterates) - 1} outer iterations, f={f:.6g}")

    return RunReport(
        iterates=iterates,
        final_x0=x.tolist(),
        final_x1=x1.tolist(),
        final_value=f,
        final_psnr=psnr(spec, x1) if spec.is_inverse else None,
        target_value=target,
        stop_reason=stop,
        evaluations=evaluator.count,
        wall_time=time.monotonic() - start,
        seed=cfg.seed,
    )
