"""Fixed-step explicit Runge-Kutta integration of the flow ODE.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from hydra import log

from .base import DimensionMismatch, NonFiniteState
from .prior import FlowField, LOG_2PI

__all__ = (
    "Scheme", "Tableau", "Direction", "Trajectory",
    "uniform_grid", "rk_step", "grid_steps", "source_log_density",
    "solve", "solve_forward", "solve_backward", "solve_forward_with_logdensity",
)

Rhs = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Tableau:
    c: Tuple[float, ...]
    a: Tuple[Tuple[float, ...], ...]
    b: Tuple[float, ...]

    @property
    def stages(self) -> int:
        return len(self.c)


class Scheme(str, enum.Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"
    RK4 = "rk4"

    @property
    def tableau(self) -> Tableau:
        return _TABLEAUX[self]

    @property
    def order(self) -> int:
        return {Scheme.EULER: 1, Scheme.MIDPOINT: 2, Scheme.RK4: 4}[self]


_TABLEAUX = {
    Scheme.EULER: Tableau(c=(0.0,), a=((),), b=(1.0,)),
    Scheme.MIDPOINT: Tableau(c=(0.0, 0.5), a=((), (0.5,)), b=(0.0, 1.0)),
    Scheme.RK4: Tableau(
        c=(0.0, 0.5, 0.5, 1.0),
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    ),
}


class Direction(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass
class Trajectory:
    """Solution on an ascending time grid.

    states[i] is x(grid[i]) whatever the direction of integration; when the
    solve did not store intermediate states only the two endpoints are kept.
    """
    grid: np.ndarray
    states: np.ndarray
    scheme: Scheme
    direction: Direction
    log_density: Optional[np.ndarray] = None
    stored: bool = True

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    @property
    def initial(self) -> np.ndarray:
        return self.states[0] if self.direction == Direction.FORWARD else self.states[-1]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1] if self.direction == Direction.FORWARD else self.states[0]

    @property
    def terminal_log_density(self) -> Optional[float]:
        if self.log_density is None:
            return None

        return float(self.log_density[-1] if self.direction == Direction.FORWARD else self.log_density[0])


def uniform_grid(t_max: float, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError(f"n_steps must be at least 1, got {n_steps}.")

    return np.linspace(0.0, t_max, n_steps + 1)


def grid_steps(grid: np.ndarray, direction: Direction) -> Iterator[Tuple[int, int, float, float]]:
    """Yield (from_index, to_index, t, h) in integration order; h < 0 backward.
    """
    n = len(grid) - 1

    if direction == Direction.FORWARD:
        for i in range(n):
            yield i, i + 1, float(grid[i]), float(grid[i + 1] - grid[i])
    else:
        for i in reversed(range(n)):
            yield i + 1, i, float(grid[i + 1]), float(grid[i] - grid[i + 1])


def rk_step(rhs: Rhs, t: float, y: np.ndarray, h: float, tableau: Tableau) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """One explicit RK step; returns (y_next, stage inputs, stage slopes).
    """
    inputs, slopes = [], []

    for c_i, a_i in zip(tableau.c, tableau.a):
        y_i = y

        for a_ij, k_j in zip(a_i, slopes):
            if a_ij:
                y_i = y_i + (h * a_ij) * k_j

        inputs.append(y_i)
        slopes.append(rhs(t + c_i * h, y_i))

    incr = None

    for b_i, k_i in zip(tableau.b, slopes):
        if b_i:
            incr = b_i * k_i if incr is None else incr + b_i * k_i

    return y + h * incr, inputs, slopes


def source_log_density(x0: np.ndarray) -> float:
    """log N(x0 | 0, I)."""
    x0 = np.asarray(x0, dtype=float)
    return float(-0.5 * x0.size * LOG_2PI - 0.5 * np.dot(x0, x0))


def solve(
        field: FlowField,
        x: np.ndarray,
        n_steps: int,
        scheme: Scheme = Scheme.MIDPOINT,
        direction: Direction = Direction.FORWARD,
        store: bool = True,
        log_density: bool = False,
) -> Trajectory:
    scheme = Scheme(scheme)
    direction = Direction(direction)
    tableau = scheme.tableau
    grid = uniform_grid(field.scheduler.t_max, n_steps)

    x = np.array(x, dtype=float).reshape(-1)
    d = x.size

    if d != field.dim:
        raise DimensionMismatch(f"State dimension {d} does not match field dimension {field.dim}.")

    if log_density:
        if direction != Direction.FORWARD:
            raise ValueError("The log-density coordinate starts from the source and is integrated forward only.")

        def rhs(t, y):
            u, div = field.velocity_and_divergence(t, y[:d])
            return np.append(u, -div)

        y = np.append(x, source_log_density(x))
    else:
        rhs = field.velocity
        y = x

    states = np.empty((n_steps + 1 if store else 2, y.size))
    states[0 if direction == Direction.FORWARD else -1] = y

    for i_from, i_to, t, h in grid_steps(grid, direction):
        y, _, _ = rk_step(rhs, t, y, h, tableau)

        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"Non-finite state after the step from t={t:.6g} (h={h:.3g}, scheme={scheme.value}).")

        if store:
            states[i_to] = y

    if not store:
        states[-1 if direction == Direction.FORWARD else 0] = y
        grid = np.array([grid[0], grid[-1]])

    log.debug(f"solve: {direction.value} {scheme.value} n={n_steps} d={d} logdensity={log_density}")

    return Trajectory(
        grid=grid,
        states=states[:, :d].copy() if log_density else states,
        scheme=scheme,
        direction=direction,
        log_density=states[:, d].copy() if log_density else None,
        stored=store,
    )


def solve_forward(field: FlowField, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT, store: bool = True) -> Trajectory:
    return solve(field, x0, n_steps, scheme, Direction.FORWARD, store=store)


def solve_backward(field: FlowField, x1: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT, store: bool = True) -> Trajectory:
    return solve(field, x1, n_steps, scheme, Direction.BACKWARD, store=store)


def solve_forward_with_logdensity(field: FlowField, x0: np.ndarray, n_steps: int, scheme: Scheme = Scheme.MIDPOINT,
                                  store: bool = True) -> Trajectory:
    return solve(field, x0, n_steps, scheme, Direction.FORWARD, store=store, log_density=True)
