"""Analytic target distributions and the exact posterior statistics of the flow.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from hydra import log
from scipy.special import logsumexp

from .base import DimensionMismatch, NonFiniteState, NumericalUnderflow
from .scheduler import Scheduler

__all__ = (
    "TargetPrior", "PosteriorStats", "PosteriorBatch", "FlowField",
    "posterior", "velocity", "velocity_jacobian", "divergence",
    "epsilon_from_velocity", "velocity_from_epsilon",
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PosteriorStats:
    denoiser: np.ndarray
    covariance: np.ndarray
    log_marginal: float
    posterior_weights: np.ndarray

    @property
    def variance_trace(self) -> float:
        return float(np.trace(self.covariance))


@dataclass(frozen=True)
class PosteriorBatch:
    """Posterior moments for n query points; covariance only when requested.
    """
    denoiser: np.ndarray
    variance_trace: np.ndarray
    log_marginal: np.ndarray
    posterior_weights: np.ndarray
    covariance: Optional[np.ndarray] = None

    def item(self, i: int = 0) -> PosteriorStats:
        if self.covariance is None:
            raise ValueError("Posterior batch evaluated without covariance.")

        return PosteriorStats(
            denoiser=self.denoiser[i],
            covariance=self.covariance[i],
            log_marginal=float(self.log_marginal[i]),
            posterior_weights=self.posterior_weights[i],
        )


class TargetPrior:
    class Kind(str, enum.Enum):
        EMPIRICAL = "empirical"
        GAUSSIAN_MIXTURE = "gaussian_mixture"
        GAUSSIAN = "gaussian"

    WEIGHT_TOL = 1e-12
    CHUNK_ELEMS = 1 << 22

    kind: Kind
    points: np.ndarray
    weights: np.ndarray
    variances: Optional[np.ndarray]
    covariance: Optional[np.ndarray]

    def __init__(
            self,
            kind: TargetPrior.Kind,
            points: np.ndarray,
            weights: Optional[np.ndarray] = None,
            variances: Optional[np.ndarray] = None,
            covariance: Optional[np.ndarray] = None,
    ):
        self.kind = TargetPrior.Kind(kind)
        self.points = np.atleast_2d(np.asarray(points, dtype=float))

        if self.points.ndim != 2 or not self.points.size:
            raise DimensionMismatch(f"Prior points must form a non-empty (M, d) matrix, got shape {self.points.shape}.")

        if not np.all(np.isfinite(self.points)):
            raise ValueError("Prior points must be finite.")

        self.weights = TargetPrior._check_weights(weights, self.points.shape[0])
        self.variances = None
        self.covariance = None

        if self.kind == TargetPrior.Kind.GAUSSIAN_MIXTURE:
            variances = np.broadcast_to(np.asarray(variances, dtype=float), (self.points.shape[0],)).copy()

            if np.any(variances <= 0.0):
                raise ValueError("Mixture component variances must be strictly positive.")

            self.variances = variances

        elif self.kind == TargetPrior.Kind.GAUSSIAN:
            if self.points.shape[0] != 1:
                raise DimensionMismatch("A Gaussian prior has exactly one mean.")

            covariance = np.asarray(covariance, dtype=float)

            if covariance.shape != (self.dim, self.dim):
                raise DimensionMismatch(f"Covariance shape {covariance.shape} does not match d={self.dim}.")

            if np.max(np.abs(covariance - covariance.T)) > 1e-12 * max(1.0, np.max(np.abs(covariance))):
                raise ValueError("Gaussian prior covariance must be symmetric.")

            lam, basis = np.linalg.eigh(0.5 * (covariance + covariance.T))

            if lam[0] < -1e-12 * max(1.0, lam[-1]):
                raise ValueError("Gaussian prior covariance must be positive semidefinite.")

            self.covariance = covariance
            self._eig = np.clip(lam, 0.0, None), basis

        with np.errstate(divide="ignore"):
            self._log_weights = np.log(self.weights)

        log.debug(f"prior: {self.kind.value} components={self.points.shape[0]} d={self.dim}")

    def __repr__(self):
        return f"{self.__class__.__name__}(kind={self.kind.value}, components={self.points.shape[0]}, dim={self.dim})"

    @staticmethod
    def _check_weights(weights: Optional[np.ndarray], count: int) -> np.ndarray:
        if weights is None:
            return np.full(count, 1.0 / count)

        weights = np.asarray(weights, dtype=float).reshape(-1)

        if weights.shape[0] != count:
            raise DimensionMismatch(f"Got {weights.shape[0]} weights for {count} components.")

        if np.any(weights < 0.0):
            raise ValueError("Prior weights must be nonnegative.")

        if abs(weights.sum() - 1.0) > TargetPrior.WEIGHT_TOL:
            raise ValueError(f"Prior weights sum to {weights.sum()!r}, not 1.")

        return weights

    @staticmethod
    def empirical(points: np.ndarray, weights: Optional[np.ndarray] = None) -> TargetPrior:
        return TargetPrior(TargetPrior.Kind.EMPIRICAL, points, weights)

    @staticmethod
    def mixture(means: np.ndarray, variances, weights: Optional[np.ndarray] = None) -> TargetPrior:
        return TargetPrior(TargetPrior.Kind.GAUSSIAN_MIXTURE, means, weights, variances=variances)

    @staticmethod
    def gaussian(mean: np.ndarray, covariance: np.ndarray) -> TargetPrior:
        return TargetPrior(TargetPrior.Kind.GAUSSIAN, np.reshape(mean, (1, -1)), covariance=covariance)

    @staticmethod
    def standard_normal(d: int) -> TargetPrior:
        return TargetPrior.mixture(np.zeros((1, d)), 1.0)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        d = self.dim

        if self.kind == TargetPrior.Kind.GAUSSIAN:
            lam, basis = self._eig
            return self.points[0] + (rng.standard_normal((n, d)) * np.sqrt(lam)) @ basis.T

        index = rng.choice(self.size, size=n, p=self.weights)
        draws = self.points[index]

        if self.kind == TargetPrior.Kind.GAUSSIAN_MIXTURE:
            draws = draws + rng.standard_normal((n, d)) * np.sqrt(self.variances[index])[:, None]

        return draws

    def posterior_batch(self, alpha, sigma, x: np.ndarray, covariance: bool = True) -> PosteriorBatch:
        """Posterior moments of x1 given x_t = x under N(x | alpha x1, sigma^2 I).

        x is an (n, d) array; alpha and sigma are scalars or one value per row.
        Rows are evaluated in chunks to bound memory.
        A non-finite query raises NonFiniteState; NumericalUnderflow is kept
        for finite points whose weights all vanish.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]

        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"Query dimension {x.shape[1]} does not match prior dimension {self.dim}.")

        if not np.all(np.isfinite(x)):
            raise NonFiniteState("Posterior queried at a non-finite state.")

        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))

        moments = {
            TargetPrior.Kind.EMPIRICAL: self._empirical,
            TargetPrior.Kind.GAUSSIAN_MIXTURE: self._mixture,
            TargetPrior.Kind.GAUSSIAN: self._gaussian,
        }[self.kind]

        rows = max(1, self.CHUNK_ELEMS // (self.size * self.dim * (self.dim if covariance else 1)))

        if n <= rows:
            return moments(alpha, sigma, x, covariance)

        parts = [
            moments(alpha[lo:lo + rows], sigma[lo:lo + rows], x[lo:lo + rows], covariance)
            for lo in range(0, n, rows)
        ]

        return PosteriorBatch(
            denoiser=np.concatenate([p.denoiser for p in parts]),
            variance_trace=np.concatenate([p.variance_trace for p in parts]),
            log_marginal=np.concatenate([p.log_marginal for p in parts]),
            posterior_weights=np.concatenate([p.posterior_weights for p in parts]),
            covariance=np.concatenate([p.covariance for p in parts]) if covariance else None,
        )

    @staticmethod
    def _normalize(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        lse = logsumexp(logits, axis=1)

        if not np.all(np.isfinite(lse)):
            raise NumericalUnderflow("All posterior weights underflowed; query point is far outside the prior support.")

        return lse, np.exp(logits - lse[:, None])

    def _empirical(self, alpha: np.ndarray, sigma: np.ndarray, x: np.ndarray, covariance: bool) -> PosteriorBatch:
        d = self.dim
        var = (sigma ** 2)[:, None]
        resid = x[:, None, :] - alpha[:, None, None] * self.points[None]
        logits = self._log_weights - np.einsum("nmd,nmd->nm", resid, resid) / (2.0 * var) - 0.5 * d * (LOG_2PI + np.log(var))
        lse, w = TargetPrior._normalize(logits)

        mean = w @ self.points
        diff = self.points[None] - mean[:, None, :]

        return PosteriorBatch(
            denoiser=mean,
            variance_trace=np.einsum("nm,nmd,nmd->n", w, diff, diff),
            log_marginal=lse,
            posterior_weights=w,
            covariance=np.einsum("nm,nmi,nmj->nij", w, diff, diff) if covariance else None,
        )

    def _mixture(self, alpha: np.ndarray, sigma: np.ndarray, x: np.ndarray, covariance: bool) -> PosteriorBatch:
        d = self.dim
        var = (sigma ** 2)[:, None]
        s2 = self.variances[None]
        total = alpha[:, None] ** 2 * s2 + var

        resid = x[:, None, :] - alpha[:, None, None] * self.points[None]
        logits = self._log_weights - np.einsum("nkd,nkd->nk", resid, resid) / (2.0 * total) - 0.5 * d * (LOG_2PI + np.log(total))
        lse, w = TargetPrior._normalize(logits)

        # per-component conjugate update
        means = self.points[None] + (alpha[:, None] * s2 / total)[:, :, None] * resid
        within = np.sum(w * (s2 * var / total), axis=1)

        mean = np.einsum("nk,nkd->nd", w, means)
        diff = means - mean[:, None, :]

        cov = None

        if covariance:
            cov = np.einsum("nk,nki,nkj->nij", w, diff, diff) + within[:, None, None] * np.eye(d)

        return PosteriorBatch(
            denoiser=mean,
            variance_trace=d * within + np.einsum("nk,nkd,nkd->n", w, diff, diff),
            log_marginal=lse,
            posterior_weights=w,
            covariance=cov,
        )

    def _gaussian(self, alpha: np.ndarray, sigma: np.ndarray, x: np.ndarray, covariance: bool) -> PosteriorBatch:
        lam, basis = self._eig
        n = x.shape[0]
        var = (sigma ** 2)[:, None]
        total = alpha[:, None] ** 2 * lam + var

        coords = (x - alpha[:, None] * self.points[0]) @ basis
        log_marginal = -0.5 * np.sum(coords ** 2 / total + LOG_2PI + np.log(total), axis=1)

        if not np.all(np.isfinite(log_marginal)):
            raise NumericalUnderflow("Gaussian marginal density underflowed.")

        spread = lam * var / total

        return PosteriorBatch(
            denoiser=self.points[0] + (coords * (alpha[:, None] * lam / total)) @ basis.T,
            variance_trace=spread.sum(axis=1),
            log_marginal=log_marginal,
            posterior_weights=np.ones((n, 1)),
            covariance=np.einsum("ik,nk,jk->nij", basis, spread, basis) if covariance else None,
        )


class FlowField:
    """Closed-form marginal velocity of the affine Gaussian path to a prior.
    """
    prior: TargetPrior
    scheduler: Scheduler

    def __init__(self, prior: TargetPrior, scheduler: Scheduler):
        self.prior = prior
        self.scheduler = scheduler

    def __repr__(self):
        return f"{self.__class__.__name__}({self.prior!r}, {self.scheduler!r})"

    @property
    def dim(self) -> int:
        return self.prior.dim

    def _batch(self, t: float, x: np.ndarray, covariance: bool) -> PosteriorBatch:
        alpha, sigma = self.scheduler.kernel(t)
        return self.prior.posterior_batch(alpha, sigma, x, covariance=covariance)

    def jacobian_scale(self, t: float) -> Tuple[float, float]:
        """Return (a_t, b_t alpha_t / sigma_t^2): D_x u = a I + c Var.
        """
        alpha, sigma = self.scheduler.kernel(t)
        a, b = self.scheduler.coeffs(t)
        return a, b * alpha / sigma ** 2

    def posterior(self, t: float, x: np.ndarray) -> PosteriorStats:
        return self._batch(t, x, True).item()

    def posterior_batch(self, t: float, x: np.ndarray, covariance: bool = True) -> PosteriorBatch:
        return self._batch(t, x, covariance)

    def denoiser(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._batch(t, x, False).denoiser.reshape(x.shape)

    def velocity(self, t: float, x: np.ndarray) -> np.ndarray:
        """a_t x + b_t x1_hat(x, t); x may be one point or an (n, d) batch.
        """
        x = np.asarray(x, dtype=float)
        a, b = self.scheduler.coeffs(t)
        return a * x + b * self._batch(t, x, False).denoiser.reshape(x.shape)

    def velocity_jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        a, c = self.jacobian_scale(t)
        return a * np.eye(self.dim) + c * self._batch(t, x, True).covariance[0]

    def divergence(self, t: float, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        a, c = self.jacobian_scale(t)
        div = self.dim * a + c * self._batch(t, x, False).variance_trace
        return float(div[0]) if x.ndim == 1 else div

    def velocity_and_divergence(self, t: float, x: np.ndarray) -> Tuple[np.ndarray, float]:
        x = np.asarray(x, dtype=float)
        a, b = self.scheduler.coeffs(t)
        _, c = self.jacobian_scale(t)
        batch = self._batch(t, x, False)
        div = self.dim * a + c * batch.variance_trace
        return a * x + b * batch.denoiser.reshape(x.shape), (float(div[0]) if x.ndim == 1 else div)

    def log_density(self, t: float, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        lm = self._batch(t, x, False).log_marginal
        return float(lm[0]) if x.ndim == 1 else lm

    def score(self, t: float, x: np.ndarray) -> np.ndarray:
        """grad log p_t(x) = (alpha_t x1_hat - x) / sigma_t^2.
        """
        x = np.asarray(x, dtype=float)
        alpha, sigma = self.scheduler.kernel(t)
        return (alpha * self.denoiser(t, x) - x) / sigma ** 2

    def epsilon(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.scheduler.epsilon_from_velocity(t, x, self.velocity(self.scheduler.clamp_positive(t), x))


def posterior(prior: TargetPrior, s: Scheduler, t: float, x: np.ndarray) -> PosteriorStats:
    return FlowField(prior, s).posterior(t, x)


def velocity(prior: TargetPrior, s: Scheduler, t: float, x: np.ndarray) -> np.ndarray:
    return FlowField(prior, s).velocity(t, x)


def velocity_jacobian(prior: TargetPrior, s: Scheduler, t: float, x: np.ndarray) -> np.ndarray:
    return FlowField(prior, s).velocity_jacobian(t, x)


def divergence(prior: TargetPrior, s: Scheduler, t: float, x: np.ndarray) -> float:
    return FlowField(prior, s).divergence(t, x)


def epsilon_from_velocity(s: Scheduler, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return s.epsilon_from_velocity(t, x, u)


def velocity_from_epsilon(s: Scheduler, t: float, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return s.velocity_from_epsilon(t, x, eps)
