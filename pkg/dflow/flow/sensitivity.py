"""Sensitivity of the generated sample to the source point.

Four routes compute the same derivative: the discrete adjoint through the
solver's update maps, the continuous adjoint ODE along the stored
trajectory, the closed-form Jacobian sigma(t_max) exp(int gamma Var dt) and
central finite differences. They agree up to their own discretization
errors, which is what the verification suites measure.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from hydra import log
from scipy.interpolate import CubicHermiteSpline

from .base import QuadratureUnresolved
from .prior import FlowField
from .solver import Direction, Scheme, Trajectory, grid_steps, rk_step, solve_forward

__all__ = (
    "Route", "SensitivityResult",
    "grad_discrete", "grad_continuous", "grad_finite_difference",
    "adjoint_discrete", "adjoint_continuous", "divergence_gradient",
    "jacobian_closed_form", "jacobian_finite_difference", "discrete_jacobian",
    "ordered_product", "variation", "sym_expm",
)

GradFn = Callable[[np.ndarray], np.ndarray]
CostFn = Callable[[np.ndarray], float]

DIV_STEP = 1e-5
STIFFNESS_BOUND = 0.05
MAX_SUBSTEPS = 10000
QUAD_TOL = 1e-4
QUAD_DOUBLINGS = 10


class Route(str, enum.Enum):
    DISCRETE_ADJOINT = "discrete"
    CONTINUOUS_ADJOINT = "continuous"
    CLOSED_FORM = "closed_form"
    FINITE_DIFFERENCE = "finite_difference"


@dataclass
class SensitivityResult:
    route: Route
    grad_x0: Optional[np.ndarray] = None
    jacobian: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.jacobian is not None and self.route not in (Route.CLOSED_FORM, Route.FINITE_DIFFERENCE):
            raise ValueError(f"Route {self.route.value} does not produce Jacobians.")


def _stored(trajectory: Trajectory) -> Trajectory:
    if not trajectory.stored:
        raise ValueError("Sensitivities need a trajectory with stored intermediate states.")

    return trajectory


def divergence_gradient(field: FlowField, t: float, x: np.ndarray, h: float = DIV_STEP) -> np.ndarray:
    """Central differences of the analytic divergence, all 2d shifted points in one batch.
    """
    d = x.size
    offsets = h * np.eye(d)
    div = field.divergence(t, np.concatenate([x + offsets, x - offsets]))
    return (div[:d] - div[d:]) / (2.0 * h)


def sym_expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix through its eigendecomposition.
    """
    lam, basis = np.linalg.eigh(0.5 * (a + a.T))
    return (basis * np.exp(lam)) @ basis.T


def adjoint_discrete(field: FlowField, trajectory: Trajectory, lam: np.ndarray, lam_z: float = 0.0) -> np.ndarray:
    """Reverse accumulation through every RK step of a stored trajectory.

    lam is the cotangent of the final state; lam_z that of the log-density
    coordinate, which only feeds back through the divergence. Stage states
    are recomputed from the stored step states.
    """
    trajectory = _stored(trajectory)
    tableau = trajectory.scheme.tableau
    lam = np.array(lam, dtype=float)

    for i_from, _, t, h in reversed(list(grid_steps(trajectory.grid, trajectory.direction))):
        _, inputs, _ = rk_step(field.velocity, t, trajectory.states[i_from], h, tableau)
        bar = [(h * b_i) * lam for b_i in tableau.b]
        total = lam.copy()

        for i in reversed(range(tableau.stages)):
            t_i = t + tableau.c[i] * h
            w = field.velocity_jacobian(t_i, inputs[i]).T @ bar[i]

            if lam_z and tableau.b[i]:
                w = w - (h * tableau.b[i] * lam_z) * divergence_gradient(field, t_i, inputs[i])

            total += w

            for j, a_ij in enumerate(tableau.a[i]):
                if a_ij:
                    bar[j] = bar[j] + (h * a_ij) * w

        lam = total

    if lam_z:
        # z(0) = log N(x0 | 0, I)
        lam = lam - lam_z * trajectory.initial

    return lam


def _spectral_radius(field: FlowField, t: float, x: np.ndarray) -> float:
    a, c = field.jacobian_scale(t)
    ev = np.linalg.eigvalsh(field.posterior(t, x).covariance)
    return max(abs(a + c * ev[0]), abs(a + c * ev[-1]))


def _hermite(field: FlowField, trajectory: Trajectory) -> CubicHermiteSpline:
    velocities = np.array([field.velocity(t, x) for t, x in zip(trajectory.grid, trajectory.states)])
    return CubicHermiteSpline(trajectory.grid, trajectory.states, velocities, axis=0)


def adjoint_continuous(field: FlowField, trajectory: Trajectory, lam: np.ndarray, lam_z: float = 0.0,
                       stiffness: float = STIFFNESS_BOUND) -> np.ndarray:
    """Integrate lam' = -(D_x u)^T lam (+ lam_z grad div u) from t_max back to 0.

    States between grid points come from a cubic Hermite interpolant of the
    stored states and velocities. A grid interval is split into substeps so
    that |h| times the spectral radius of D_x u stays below `stiffness`.
    """
    trajectory = _stored(trajectory)

    if trajectory.direction != Direction.FORWARD:
        raise ValueError("The continuous adjoint runs against a forward trajectory.")

    path = _hermite(field, trajectory)
    tableau = trajectory.scheme.tableau
    lam = np.array(lam, dtype=float)

    def rhs(t, v):
        x = path(t)
        out = -(field.velocity_jacobian(t, x).T @ v)

        if lam_z:
            out = out + lam_z * divergence_gradient(field, t, x)

        return out

    total_substeps = 0

    for i_from, i_to, t, h in grid_steps(trajectory.grid, Direction.BACKWARD):
        rho = max(
            _spectral_radius(field, t, trajectory.states[i_from]),
            _spectral_radius(field, t + h, trajectory.states[i_to]),
        )
        m = min(max(1, math.ceil(abs(h) * rho / stiffness)), MAX_SUBSTEPS)

        if m == MAX_SUBSTEPS:
            log.warning(f"adjoint: substep cap {MAX_SUBSTEPS} reached at t={t:.6g}")

        sub = h / m

        for k in range(m):
            lam, _, _ = rk_step(rhs, t + k * sub, lam, sub, tableau)

        total_substeps += m

    log.debug(f"adjoint: continuous n={trajectory.n_steps} substeps={total_substeps}")

    if lam_z:
        lam = lam - lam_z * trajectory.initial

    return lam


def _forward(field: FlowField, x0: np.ndarray, n_steps: int, scheme: Scheme, trajectory: Optional[Trajectory]) -> Trajectory:
    return trajectory if trajectory is not None else solve_forward(field, x0, n_steps, scheme)


def grad_discrete(field: FlowField, cost_grad: GradFn, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                  trajectory: Optional[Trajectory] = None, nll_weight: float = 0.0) -> SensitivityResult:
    """Exact gradient of x0 -> L(x_N) for the discretized flow map.

    nll_weight adds nll_weight * (-z(t_max)) to the objective, the target
    log-likelihood term carried by the augmented system.
    """
    trajectory = _forward(field, x0, n_steps, scheme, trajectory)
    grad = adjoint_discrete(field, trajectory, cost_grad(trajectory.terminal), lam_z=-nll_weight)
    return SensitivityResult(Route.DISCRETE_ADJOINT, grad_x0=grad)


def grad_continuous(field: FlowField, cost_grad: GradFn, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                    trajectory: Optional[Trajectory] = None, nll_weight: float = 0.0,
                    stiffness: float = STIFFNESS_BOUND) -> SensitivityResult:
    trajectory = _forward(field, x0, n_steps, scheme, trajectory)
    grad = adjoint_continuous(field, trajectory, cost_grad(trajectory.terminal), lam_z=-nll_weight, stiffness=stiffness)
    return SensitivityResult(Route.CONTINUOUS_ADJOINT, grad_x0=grad)


def grad_finite_difference(field: FlowField, cost: CostFn, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                           h: float = 1e-6) -> SensitivityResult:
    x0 = np.asarray(x0, dtype=float)
    grad = np.empty_like(x0)

    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = h
        hi = cost(solve_forward(field, x0 + e, n_steps, scheme, store=False).terminal)
        lo = cost(solve_forward(field, x0 - e, n_steps, scheme, store=False).terminal)
        grad[j] = (hi - lo) / (2.0 * h)

    return SensitivityResult(Route.FINITE_DIFFERENCE, grad_x0=grad)


def jacobian_finite_difference(field: FlowField, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                               h: float = 1e-5) -> SensitivityResult:
    if h <= 0.0:
        raise ValueError(f"Finite-difference step must be positive, got {h}.")

    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    jac = np.empty((d, d))

    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        hi = solve_forward(field, x0 + e, n_steps, scheme, store=False).terminal
        lo = solve_forward(field, x0 - e, n_steps, scheme, store=False).terminal
        jac[:, j] = (hi - lo) / (2.0 * h)

    return SensitivityResult(Route.FINITE_DIFFERENCE, jacobian=jac)


def discrete_jacobian(field: FlowField, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                      trajectory: Optional[Trajectory] = None) -> np.ndarray:
    """D x_N / D x0 of the discretized map, one reverse pass per output coordinate.
    """
    trajectory = _forward(field, x0, n_steps, scheme, trajectory)
    d = field.dim
    return np.array([adjoint_discrete(field, trajectory, row) for row in np.eye(d)])


@dataclass
class _Quadrature:
    times: np.ndarray
    clock: np.ndarray
    integrand: np.ndarray

    def pieces(self) -> np.ndarray:
        """Trapezoid contribution of every interval, shape (N-1, d, d).
        """
        dv = np.diff(self.clock)
        return 0.5 * (self.integrand[1:] + self.integrand[:-1]) * dv[:, None, None]

    def total(self) -> np.ndarray:
        return self.pieces().sum(axis=0)


def _integrand(field: FlowField, times: np.ndarray, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s = field.scheduler
    alpha, sigma = s.kernel(times)
    snr = s.snr(times)
    cov = field.prior.posterior_batch(alpha, sigma, states, covariance=True).covariance
    return 0.5 * np.log1p(snr), cov * (1.0 + snr)[:, None, None]


def _quadrature(field: FlowField, trajectory: Trajectory, tol: float, max_doublings: int) -> _Quadrature:
    """Converged nodes for int_0^t_max gamma_t Var(x1 | x(t)) dt.

    The integral is taken in the clock v = log(1 + snr) / 2, where it becomes
    int Var (1 + snr) dv with a bounded integrand. Each refinement inserts the
    time midpoints, evaluating states there from the Hermite interpolant.
    """
    trajectory = _stored(trajectory)
    path = _hermite(field, trajectory)

    times = np.asarray(trajectory.grid, dtype=float)
    clock, integrand = _integrand(field, times, trajectory.states)
    quad = _Quadrature(times, clock, integrand)
    total = quad.total()
    change = float("inf")

    for level in range(1, max_doublings + 1):
        mids = 0.5 * (quad.times[1:] + quad.times[:-1])
        mid_clock, mid_integrand = _integrand(field, mids, path(mids))

        n = quad.times.size
        times = np.empty(2 * n - 1)
        clock = np.empty(2 * n - 1)
        integrand = np.empty((2 * n - 1,) + quad.integrand.shape[1:])
        times[0::2], times[1::2] = quad.times, mids
        clock[0::2], clock[1::2] = quad.clock, mid_clock
        integrand[0::2], integrand[1::2] = quad.integrand, mid_integrand

        quad = _Quadrature(times, clock, integrand)
        refined = quad.total()
        change = float(np.max(np.abs(refined - total)))
        total = refined

        if change < tol:
            log.debug(f"quadrature: converged after {level} doublings, nodes={times.size} change={change:.3g}")
            return quad

    log.warning(f"quadrature: unresolved after {max_doublings} doublings (change={change:.3g})")
    raise QuadratureUnresolved(f"Covariance integral still changes by {change:.3g} > {tol:.3g} after {max_doublings} doublings.")


def jacobian_closed_form(field: FlowField, trajectory: Trajectory, tol: float = QUAD_TOL,
                         max_doublings: int = QUAD_DOUBLINGS) -> SensitivityResult:
    """sigma(t_max) exp(int_0^t_max gamma_t Var(x1 | x(t)) dt) along the trajectory.
    """
    integral = _quadrature(field, trajectory, tol, max_doublings).total()
    jac = field.scheduler.sigma_max() * sym_expm(integral)
    return SensitivityResult(Route.CLOSED_FORM, jacobian=0.5 * (jac + jac.T))


def ordered_product(field: FlowField, trajectory: Trajectory, tol: float = QUAD_TOL,
                    max_doublings: int = QUAD_DOUBLINGS) -> np.ndarray:
    """Time-ordered propagator sigma(t_max) prod_i exp(dA_i), later intervals on the left.

    Equal to the closed form whenever the covariances along the path commute.
    """
    jac = np.eye(field.dim)

    for piece in _quadrature(field, trajectory, tol, max_doublings).pieces():
        jac = sym_expm(piece) @ jac

    return field.scheduler.sigma_max() * jac


def variation(field: FlowField, trajectory: Trajectory, grad_l: np.ndarray, jacobian: Optional[np.ndarray] = None) -> np.ndarray:
    """First-order change of x(1) for a gradient step on x0: -J^2 grad L.
    """
    if jacobian is None:
        jacobian = jacobian_closed_form(field, trajectory).jacobian

    return -(jacobian @ (jacobian @ np.asarray(grad_l, dtype=float)))
