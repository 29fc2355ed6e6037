"""Limited-memory BFGS with strong Wolfe or backtracking line search.
"""
from __future__ import annotations

import enum
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Optional, Tuple

import numpy as np
from hydra import log
from scipy.optimize import line_search as wolfe_search

from ..flow.base import LineSearchFailure

__all__ = "LineSearch", "LineSearchParams", "Evaluator", "LBFGS", "StepResult", "MinimizeResult", "minimize"

Fun = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class LineSearch(str, enum.Enum):
    STRONG_WOLFE = "strong_wolfe"
    BACKTRACKING = "backtracking"


@dataclass(frozen=True)
class LineSearchParams:
    kind: LineSearch = LineSearch.STRONG_WOLFE
    c1: float = 1e-4
    c2: float = 0.9
    rho: float = 0.5
    max_evals: int = 30
    max_step: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError(f"Line search needs 0 < c1 < c2 < 1, got c1={self.c1} c2={self.c2}.")

        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"Backtracking factor must lie in (0, 1), got {self.rho}.")

        if self.max_step is not None and not self.max_step > 0.0:
            raise ValueError(f"Step bound must be positive, got {self.max_step}.")

    def first_step(self, d: np.ndarray) -> float:
        """Largest step factor along d allowed by max_step, capped at 1."""
        if self.max_step is None:
            return 1.0

        return min(1.0, self.max_step / max(float(np.linalg.norm(d)), 1e-300))


class Evaluator:
    """Memoizes (value, gradient) per point; one flow solve serves both.
    """
    fun: Fun
    count: int

    def __init__(self, fun: Fun):
        self.fun = fun
        self.count = 0
        self._cache: Dict[bytes, Tuple[float, np.ndarray]] = {}

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        key = np.ascontiguousarray(x, dtype=float).tobytes()
        hit = self._cache.get(key)

        if hit is None:
            self.count += 1
            f, g = self.fun(np.array(x, dtype=float))
            hit = self._cache[key] = float(f), np.asarray(g, dtype=float)

            if len(self._cache) > 64:
                self._cache.pop(next(iter(self._cache)))

        return hit

    def value(self, x: np.ndarray) -> float:
        return self(x)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


@dataclass
class StepResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    step: float
    fallback: bool = False


class LBFGS:
    SKIP_CURVATURE = 1e-10

    history: int
    params: LineSearchParams
    pairs: Deque[Tuple[np.ndarray, np.ndarray, float]]

    def __init__(self, history: int = 10, params: Optional[LineSearchParams] = None):
        if history < 1:
            raise ValueError(f"L-BFGS history must be at least 1, got {history}.")

        self.history = history
        self.params = params or LineSearchParams()
        self.pairs = deque(maxlen=history)

    def reset(self):
        self.pairs.clear()

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(np.dot(s, y))

        if sy <= self.SKIP_CURVATURE:
            log.warning(f"lbfgs: skipped curvature pair with s'y={sy:.3g}")
            return False

        self.pairs.append((s, y, 1.0 / sy))
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        """-H g by the two-loop recursion over stored pairs."""
        if not self.pairs:
            return -g * min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))

        q = g.copy()
        alphas = []

        for s, y, rho in reversed(self.pairs):
            a = rho * float(np.dot(s, q))
            alphas.append(a)
            q -= a * y

        s, y, _ = self.pairs[-1]
        q *= float(np.dot(s, y)) / float(np.dot(y, y))

        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(np.dot(y, q))
            q += (a - b) * s

        return -q

    def _wolfe(self, fun: Evaluator, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray) -> Optional[float]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, *_ = wolfe_search(
                fun.value, fun.grad, x, d, gfk=g, old_fval=f,
                c1=self.params.c1, c2=self.params.c2, maxiter=self.params.max_evals,
                amax=None if self.params.max_step is None else self.params.first_step(d),
            )

        return alpha

    def _backtrack(self, fun: Evaluator, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray) -> Optional[float]:
        slope = float(np.dot(g, d))
        alpha = self.params.first_step(d)

        for _ in range(self.params.max_evals):
            if fun.value(x + alpha * d) <= f + self.params.c1 * alpha * slope:
                return alpha

            alpha *= self.params.rho

        return None

    def step(self, fun: Evaluator, x: np.ndarray, f: float, g: np.ndarray) -> StepResult:
        """One accepted update, falling back to steepest descent with backtracking.

        Raises LineSearchFailure when the fallback finds no decrease either.
        """
        d = self.direction(g)

        if float(np.dot(g, d)) >= 0.0:
            log.warning("lbfgs: direction is not a descent direction; resetting history")
            self.reset()
            d = self.direction(g)

        if self.params.kind == LineSearch.STRONG_WOLFE:
            alpha = self._wolfe(fun, x, f, g, d)
        else:
            alpha = self._backtrack(fun, x, f, g, d)

        fallback = False

        if alpha is None or not fun.value(x + alpha * d) <= f:
            log.warning("lbfgs: line search failed; falling back to steepest descent")
            self.reset()
            d = -g * min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))
            alpha = self._backtrack(fun, x, f, g, d)
            fallback = True

            if alpha is None:
                raise LineSearchFailure(f"No decrease along steepest descent from f={f!r}.")

        x_new = x + alpha * d
        f_new, g_new = fun(x_new)
        self.update(x_new - x, g_new - g)

        return StepResult(x=x_new, f=f_new, g=g_new, step=float(alpha * np.linalg.norm(d)), fallback=fallback)


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    evaluations: int
    converged: bool


def minimize(fun: Fun, x0: np.ndarray, history: int = 10, max_iters: int = 200, grad_tol: float = 1e-10,
             params: Optional[LineSearchParams] = None) -> MinimizeResult:
    """Plain L-BFGS loop on a smooth function; stops on the gradient norm.
    """
    evaluator = Evaluator(fun)
    solver = LBFGS(history, params)
    x = np.array(x0, dtype=float)
    f, g = evaluator(x)

    for it in range(max_iters):
        if float(np.linalg.norm(g)) < grad_tol:
            return MinimizeResult(x, f, g, it, evaluator.count, True)

        try:
            res = solver.step(evaluator, x, f, g)
        except LineSearchFailure as exc:
            log.debug(f"minimize: stopped after {it} iterations: {exc}")
            return MinimizeResult(x, f, g, it, evaluator.count, float(np.linalg.norm(g)) < grad_tol)

        x, f, g = res.x, res.f, res.g

    return MinimizeResult(x, f, g, max_iters, evaluator.count, float(np.linalg.norm(g)) < grad_tol)
