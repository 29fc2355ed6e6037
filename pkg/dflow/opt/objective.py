"""Terminal costs, linear corruption operators and source-point regularizers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import convolve1d

from ..flow.base import DimensionMismatch, NonFiniteCost, ZeroNorm
from ..flow.prior import FlowField
from ..flow.sensitivity import grad_discrete
from ..flow.solver import Scheme, solve_forward_with_logdensity

__all__ = (
    "CorruptionOp", "LevelFunction", "Regularizer", "CostSpec",
    "cost_and_grad", "psnr", "noise_psnr",
    "regularizer_chi_d", "regularizer_source_nll", "regularizer_target_nll",
)

MSE_FLOOR = 1e-30
ZERO_NORM = 1e-12
PSNR_SCALE = 10.0 / math.log(10.0)


class CorruptionOp:
    """Known linear measurement map H with observation noise level sigma_y.
    """
    class Kind(str, enum.Enum):
        IDENTITY = "identity"
        MASK = "mask"
        SUBSAMPLE = "subsample"
        BLUR1D = "blur1d"

    PINV_RCOND = 1e-8

    kind: Kind
    dim: int
    noise_sigma: float

    def __init__(self, kind: CorruptionOp.Kind, dim: int, keep: Optional[np.ndarray] = None, factor: int = 1,
                 kernel: Optional[np.ndarray] = None, noise_sigma: float = 0.0):
        self.kind = CorruptionOp.Kind(kind)
        self.dim = int(dim)
        self.noise_sigma = float(noise_sigma)
        self.keep = None
        self.factor = 1
        self.kernel = None
        self._matrix = None
        self._pinv = None

        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be nonnegative, got {noise_sigma}.")

        if self.kind == CorruptionOp.Kind.MASK:
            keep = np.asarray(keep, dtype=bool).reshape(-1)

            if keep.size != self.dim:
                raise DimensionMismatch(f"Mask of length {keep.size} for d={self.dim}.")

            self.keep = keep

        elif self.kind == CorruptionOp.Kind.SUBSAMPLE:
            if factor < 1 or self.dim % factor:
                raise ValueError(f"Subsample factor {factor} must divide d={self.dim}.")

            self.factor = int(factor)

        elif self.kind == CorruptionOp.Kind.BLUR1D:
            kernel = np.asarray(kernel, dtype=float).reshape(-1)

            if kernel.size % 2 == 0:
                raise ValueError(f"Blur kernel length must be odd, got {kernel.size}.")

            if kernel.sum() == 0.0:
                raise ValueError("Blur kernel sums to zero and cannot be normalized.")

            self.kernel = kernel / kernel.sum()
            self._matrix = convolve1d(np.eye(self.dim), self.kernel, axis=0, mode="reflect")

    def __repr__(self):
        return f"{self.__class__.__name__}(kind={self.kind.value}, dim={self.dim}, out_dim={self.out_dim}, noise_sigma={self.noise_sigma})"

    @staticmethod
    def identity(dim: int, noise_sigma: float = 0.0) -> CorruptionOp:
        return CorruptionOp(CorruptionOp.Kind.IDENTITY, dim, noise_sigma=noise_sigma)

    @staticmethod
    def mask(keep: np.ndarray, noise_sigma: float = 0.0) -> CorruptionOp:
        keep = np.asarray(keep, dtype=bool).reshape(-1)
        return CorruptionOp(CorruptionOp.Kind.MASK, keep.size, keep=keep, noise_sigma=noise_sigma)

    @staticmethod
    def subsample(dim: int, factor: int, noise_sigma: float = 0.0) -> CorruptionOp:
        return CorruptionOp(CorruptionOp.Kind.SUBSAMPLE, dim, factor=factor, noise_sigma=noise_sigma)

    @staticmethod
    def blur1d(dim: int, kernel: np.ndarray, noise_sigma: float = 0.0) -> CorruptionOp:
        return CorruptionOp(CorruptionOp.Kind.BLUR1D, dim, kernel=kernel, noise_sigma=noise_sigma)

    @property
    def out_dim(self) -> int:
        if self.kind == CorruptionOp.Kind.MASK:
            return int(self.keep.sum())

        if self.kind == CorruptionOp.Kind.SUBSAMPLE:
            return self.dim // self.factor

        return self.dim

    @property
    def matrix(self) -> np.ndarray:
        """Dense n x d matrix of H."""
        if self._matrix is None:
            self._matrix = np.array([self.apply(e) for e in np.eye(self.dim)]).T

        return self._matrix

    def _check(self, v: np.ndarray, size: int, what: str) -> np.ndarray:
        v = np.asarray(v, dtype=float)

        if v.shape != (size,):
            raise DimensionMismatch(f"{self.kind.value}: {what} has shape {v.shape}, expected ({size},).")

        return v

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x, self.dim, "input")

        if self.kind == CorruptionOp.Kind.MASK:
            return x[self.keep]

        if self.kind == CorruptionOp.Kind.SUBSAMPLE:
            return x[::self.factor].copy()

        if self.kind == CorruptionOp.Kind.BLUR1D:
            return self._matrix @ x

        return x.copy()

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v, self.out_dim, "cotangent")

        if self.kind == CorruptionOp.Kind.MASK:
            out = np.zeros(self.dim)
            out[self.keep] = v
            return out

        if self.kind == CorruptionOp.Kind.SUBSAMPLE:
            out = np.zeros(self.dim)
            out[::self.factor] = v
            return out

        if self.kind == CorruptionOp.Kind.BLUR1D:
            return self._matrix.T @ v

        return v.copy()

    def lift(self, y: np.ndarray) -> np.ndarray:
        """Full-dimensional completion of an observation: H^T y with unobserved
        coordinates set to the mean of y for masks and subsampling.
        """
        y = self._check(y, self.out_dim, "observation")

        if self.kind == CorruptionOp.Kind.MASK:
            out = np.full(self.dim, y.mean() if y.size else 0.0)
            out[self.keep] = y
            return out

        if self.kind == CorruptionOp.Kind.SUBSAMPLE:
            out = np.full(self.dim, y.mean())
            out[::self.factor] = y
            return out

        return y.copy()

    def pinv(self, y: np.ndarray) -> np.ndarray:
        y = self._check(y, self.out_dim, "observation")

        if self.kind in (CorruptionOp.Kind.MASK, CorruptionOp.Kind.SUBSAMPLE, CorruptionOp.Kind.IDENTITY):
            return self.apply_adjoint(y)

        return self.pinv_matrix() @ y

    def pinv_matrix(self) -> np.ndarray:
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.matrix, rcond=self.PINV_RCOND)

        return self._pinv

    def projector(self) -> np.ndarray:
        """H^+ H, the orthogonal projector onto the row space of H."""
        return self.pinv_matrix() @ self.matrix


class LevelFunction:
    """Analytic scalar function F for level-set costs (F(x) - c)^2.
    """
    class Kind(str, enum.Enum):
        SQNORM = "sqnorm"
        LINEAR = "linear"

    def __init__(self, kind: LevelFunction.Kind, coef: Optional[np.ndarray] = None):
        self.kind = LevelFunction.Kind(kind)
        self.coef = None if coef is None else np.asarray(coef, dtype=float).reshape(-1)

        if self.kind == LevelFunction.Kind.LINEAR and self.coef is None:
            raise ValueError("A linear level function needs coefficients.")

    def value(self, x: np.ndarray) -> float:
        if self.kind == LevelFunction.Kind.SQNORM:
            return float(np.dot(x, x))

        return float(np.dot(self.coef, x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self.kind == LevelFunction.Kind.SQNORM:
            return 2.0 * x

        return self.coef.copy()


@dataclass
class Regularizer:
    class Kind(str, enum.Enum):
        CHI_D = "chi_d"
        SOURCE_NLL = "source_nll"
        TARGET_NLL = "target_nll"

    kind: Kind
    weight: float
    printed_sign: bool = False

    def __post_init__(self):
        self.kind = Regularizer.Kind(self.kind)

        if self.weight < 0.0:
            raise ValueError(f"Regularizer weight must be nonnegative, got {self.weight}.")


@dataclass
class CostSpec:
    class Kind(str, enum.Enum):
        RECONSTRUCTION = "reconstruction"
        NEG_PSNR = "neg_psnr"
        LEVEL_SET = "level_set"
        REVERSED_SAMPLING = "reversed_sampling"

    kind: Kind
    y: Optional[np.ndarray] = None
    corruption: Optional[CorruptionOp] = None
    level: Optional[LevelFunction] = None
    level_target: float = 0.0
    peak: Optional[float] = None
    pseudo_inverse: bool = False
    regularizers: List[Regularizer] = dc_field(default_factory=list)

    def __post_init__(self):
        self.kind = CostSpec.Kind(self.kind)

        if self.kind == CostSpec.Kind.LEVEL_SET:
            if self.level is None:
                raise ValueError("A level-set cost needs a level function.")
        elif self.y is None:
            raise ValueError(f"A {self.kind.value} cost needs an observation.")
        else:
            self.y = np.asarray(self.y, dtype=float).reshape(-1)

        if self.kind in (CostSpec.Kind.RECONSTRUCTION, CostSpec.Kind.NEG_PSNR) and self.corruption is None:
            self.corruption = CorruptionOp.identity(self.y.size)

    @property
    def nll_weight(self) -> float:
        return sum(r.weight for r in self.regularizers if r.kind == Regularizer.Kind.TARGET_NLL)

    @property
    def is_inverse(self) -> bool:
        return self.kind in (CostSpec.Kind.RECONSTRUCTION, CostSpec.Kind.NEG_PSNR)

    def peak_value(self) -> float:
        if self.peak is not None:
            return float(self.peak)

        span = float(np.max(self.y) - np.min(self.y))
        return span if span > 0.0 else 1.0

    def residual(self, x1: np.ndarray) -> np.ndarray:
        """H x - y, or H^+ H x - H^+ y for the pseudo-inverse form."""
        if self.pseudo_inverse:
            return self.corruption.projector() @ x1 - self.corruption.pinv(self.y)

        return self.corruption.apply(x1) - self.y

    def residual_adjoint(self, r: np.ndarray) -> np.ndarray:
        if self.pseudo_inverse:
            return self.corruption.projector().T @ r

        return self.corruption.apply_adjoint(r)


def psnr(spec: CostSpec, x1: np.ndarray) -> float:
    r = spec.residual(np.asarray(x1, dtype=float))
    mse = max(float(np.dot(r, r)) / r.size, MSE_FLOOR)
    return PSNR_SCALE * math.log(spec.peak_value() ** 2 / mse)


def noise_psnr(spec: CostSpec) -> float:
    """PSNR of an observation corrupted by exactly its noise level."""
    sigma = spec.corruption.noise_sigma

    if sigma <= 0.0:
        raise ValueError("A noise-matched PSNR target needs noise_sigma > 0.")

    return PSNR_SCALE * math.log(spec.peak_value() ** 2 / sigma ** 2)


def regularizer_chi_d(x0: np.ndarray, printed_sign: bool = False) -> Tuple[float, np.ndarray]:
    """Negative log-density of |x0| under the chi distribution with d degrees of freedom.

    -(d-1) log r + r^2 / 2 up to a constant, minimized at r = sqrt(d-1).
    printed_sign flips both terms.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    r2 = float(np.dot(x0, x0))
    r = math.sqrt(r2)

    if r < ZERO_NORM:
        raise ZeroNorm(f"chi_d regularizer undefined at |x0| = {r:.3g}.")

    value = -(d - 1) * math.log(r) + 0.5 * r2
    grad = (1.0 - (d - 1) / r2) * x0

    if printed_sign:
        return -value, -grad

    return value, grad


def regularizer_source_nll(x0: np.ndarray) -> Tuple[float, np.ndarray]:
    x0 = np.asarray(x0, dtype=float)
    return 0.5 * float(np.dot(x0, x0)), x0.copy()


def regularizer_target_nll(field: FlowField, x0: np.ndarray, n_steps: int,
                           scheme: Scheme = Scheme.MIDPOINT) -> Tuple[float, np.ndarray]:
    """-log p_1(x(1)) from the augmented solve, with its gradient through the discrete adjoint.
    """
    trajectory = solve_forward_with_logdensity(field, x0, n_steps, scheme)
    zero = np.zeros(field.dim)
    grad = grad_discrete(field, lambda _: zero, x0, n_steps, scheme, trajectory=trajectory, nll_weight=1.0).grad_x0
    return -trajectory.terminal_log_density, grad


def cost_and_grad(spec: CostSpec, x1: np.ndarray, x0: np.ndarray,
                  log_density_x1: Optional[float] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """Return (value, grad wrt x(1), grad wrt x0 of the direct regularizers).

    Target log-likelihood terms add weight * (-log_density_x1) to the value;
    their gradient flows through the augmented adjoint, not through this
    function.
    """
    x1 = np.asarray(x1, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    if x1.shape != x0.shape:
        raise DimensionMismatch(f"x(1) has shape {x1.shape} but x0 has shape {x0.shape}.")

    kind = spec.kind

    if kind == CostSpec.Kind.REVERSED_SAMPLING:
        if spec.y.shape != x1.shape:
            raise DimensionMismatch(f"Target has shape {spec.y.shape}, sample has shape {x1.shape}.")

        r = x1 - spec.y
        value, grad = float(np.dot(r, r)), 2.0 * r

    elif kind == CostSpec.Kind.LEVEL_SET:
        gap = spec.level.value(x1) - spec.level_target
        value, grad = gap ** 2, 2.0 * gap * spec.level.grad(x1)

    else:
        r = spec.residual(x1)
        sq = float(np.dot(r, r))

        if kind == CostSpec.Kind.RECONSTRUCTION:
            value, grad = sq, 2.0 * spec.residual_adjoint(r)
        else:
            mse = max(sq / r.size, MSE_FLOOR)
            value = -PSNR_SCALE * math.log(spec.peak_value() ** 2 / mse)
            grad = (PSNR_SCALE / mse) * (2.0 / r.size) * spec.residual_adjoint(r)

    grad_x0 = np.zeros_like(x0)

    for reg in spec.regularizers:
        if not reg.weight:
            continue

        if reg.kind == Regularizer.Kind.CHI_D:
            v, g = regularizer_chi_d(x0, printed_sign=reg.printed_sign)
        elif reg.kind == Regularizer.Kind.SOURCE_NLL:
            v, g = regularizer_source_nll(x0)
        else:
            if log_density_x1 is None:
                raise ValueError("A target_nll regularizer needs the log-density of x(1).")

            value += reg.weight * -log_density_x1
            continue

        value += reg.weight * v
        grad_x0 += reg.weight * g

    if not math.isfinite(value) or not np.all(np.isfinite(grad)) or not np.all(np.isfinite(grad_x0)):
        raise NonFiniteCost(f"{kind.value} cost evaluated to {value!r}.")

    return value, grad, grad_x0
