"""Affine Gaussian path schedulers.

A scheduler is the pair (alpha_t, sigma_t) of the Gaussian kernel
N(x | alpha_t x1, sigma_t^2 I) together with its time derivatives. Everything
the velocity field needs (a_t, b_t, snr, gamma) is derived here.
"""
from __future__ import annotations

import enum
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .base import DegenerateScheduler

__all__ = "Scheduler",

Time = Union[float, np.ndarray]
ScalarFn = Callable[[Time], Time]


class Scheduler:
    class Kind(str, enum.Enum):
        COND_OT = "cond_ot"
        VP = "vp"
        CUSTOM = "custom"

    T_MAX = 1.0 - 1e-3
    T_MIN = 1e-3
    GAMMA_STEP = 1e-6

    kind: Kind
    alpha: ScalarFn
    sigma: ScalarFn
    alpha_dot: ScalarFn
    sigma_dot: ScalarFn
    t_max: float
    t_min: float

    def __init__(
            self,
            kind: Scheduler.Kind,
            alpha: ScalarFn,
            sigma: ScalarFn,
            alpha_dot: ScalarFn,
            sigma_dot: ScalarFn,
            t_max: float = T_MAX,
            t_min: float = T_MIN,
            gamma: Optional[ScalarFn] = None,
    ):
        if not 0.0 < t_max <= 1.0:
            raise ValueError(f"Scheduler t_max={t_max} outside (0, 1].")

        if not 0.0 <= t_min < t_max:
            raise ValueError(f"Scheduler t_min={t_min} outside [0, t_max).")

        self.kind = Scheduler.Kind(kind)
        self.alpha = alpha
        self.sigma = sigma
        self.alpha_dot = alpha_dot
        self.sigma_dot = sigma_dot
        self.t_max = float(t_max)
        self.t_min = float(t_min)
        self._gamma = gamma

    def __repr__(self):
        return f"{self.__class__.__name__}(kind={self.kind.value}, t_max={self.t_max!r})"

    @staticmethod
    def cond_ot(t_max: float = T_MAX, t_min: float = T_MIN) -> Scheduler:
        return Scheduler(
            kind=Scheduler.Kind.COND_OT,
            alpha=lambda t: t,
            sigma=lambda t: 1.0 - t,
            alpha_dot=lambda t: 0.0 * t + 1.0,
            sigma_dot=lambda t: 0.0 * t - 1.0,
            t_max=t_max,
            t_min=t_min,
            gamma=lambda t: t / (1.0 - t) ** 3,
        )

    @staticmethod
    def vp(t_max: float = T_MAX, t_min: float = T_MIN) -> Scheduler:
        """Cosine variance preserving path, alpha^2 + sigma^2 = 1.
        """
        w = np.pi / 2

        return Scheduler(
            kind=Scheduler.Kind.VP,
            alpha=lambda t: np.sin(w * t),
            sigma=lambda t: np.cos(w * t),
            alpha_dot=lambda t: w * np.cos(w * t),
            sigma_dot=lambda t: -w * np.sin(w * t),
            t_max=t_max,
            t_min=t_min,
            gamma=lambda t: w * np.tan(w * t) / np.cos(w * t) ** 2,
        )

    @staticmethod
    def custom(alpha: ScalarFn, sigma: ScalarFn, alpha_dot: ScalarFn, sigma_dot: ScalarFn,
               t_max: float = T_MAX, t_min: float = T_MIN) -> Scheduler:
        """User supplied path; derivatives are required, gamma is differenced.
        """
        return Scheduler(Scheduler.Kind.CUSTOM, alpha, sigma, alpha_dot, sigma_dot, t_max=t_max, t_min=t_min)

    @staticmethod
    def by_name(kind: str, t_max: float = T_MAX, t_min: float = T_MIN) -> Scheduler:
        kind = Scheduler.Kind(kind)

        if kind == Scheduler.Kind.COND_OT:
            return Scheduler.cond_ot(t_max=t_max, t_min=t_min)

        if kind == Scheduler.Kind.VP:
            return Scheduler.vp(t_max=t_max, t_min=t_min)

        raise ValueError("Custom schedulers are built from callables, not by name.")

    def clamp(self, t: Time) -> Time:
        return np.clip(t, 0.0, self.t_max) if isinstance(t, np.ndarray) else min(max(float(t), 0.0), self.t_max)

    def clamp_positive(self, t: Time) -> Time:
        """Clamp into [t_min, t_max] for quantities singular at alpha = 0.
        """
        return np.clip(t, self.t_min, self.t_max) if isinstance(t, np.ndarray) else min(max(float(t), self.t_min), self.t_max)

    def _sigma(self, t: Time) -> Time:
        sigma = self.sigma(t)

        if np.any(np.asarray(sigma) <= 0.0):
            raise DegenerateScheduler(f"sigma(t) = 0 at t={t} after clamping to t_max={self.t_max}")

        return sigma

    def kernel(self, t: Time) -> Tuple[Time, Time]:
        """Return (alpha_t, sigma_t) at the clamped time.
        """
        t = self.clamp(t)
        return self.alpha(t), self._sigma(t)

    def coeffs(self, t: Time) -> Tuple[Time, Time]:
        """Return (a_t, b_t) = (sigma'/sigma, alpha' - alpha sigma'/sigma).
        """
        t = self.clamp(t)
        rate = self.sigma_dot(t) / self._sigma(t)
        return rate, self.alpha_dot(t) - self.alpha(t) * rate

    def snr(self, t: Time) -> Time:
        t = self.clamp(t)
        return (self.alpha(t) / self._sigma(t)) ** 2

    def gamma(self, t: Time) -> Time:
        """Half the time derivative of snr.

        Custom schedulers use a central difference with step GAMMA_STEP
        (one-sided at t=0), accurate to roughly 1e-6 relative for smooth paths.
        """
        t = self.clamp(t)

        if self._gamma is not None:
            self._sigma(t)
            return self._gamma(t)

        h = self.GAMMA_STEP
        lo = np.maximum(t - h, 0.0) if isinstance(t, np.ndarray) else max(t - h, 0.0)
        hi = t + h

        def snr_raw(s):
            return (self.alpha(s) / self._sigma(s)) ** 2

        return 0.5 * (snr_raw(hi) - snr_raw(lo)) / (hi - lo)

    def log_sigma_ratio(self) -> float:
        """log sigma(t_max) - log sigma(0), the exact integral of a_t over [0, t_max].
        """
        return float(np.log(self._sigma(self.t_max)) - np.log(self._sigma(0.0)))

    def sigma_max(self) -> float:
        """sigma at the clamped endpoint, the prefactor of the source-to-sample Jacobian.
        """
        return float(self._sigma(self.t_max))

    def _eps_coeffs(self, t: float) -> Tuple[float, float]:
        t = self.clamp_positive(t)
        alpha = self.alpha(t)

        if alpha <= 0.0:
            raise DegenerateScheduler(f"alpha(t) = 0 at t={t} after clamping to t_min={self.t_min}")

        sigma = self._sigma(t)
        rate = self.alpha_dot(t) / alpha
        return rate, rate * sigma - self.sigma_dot(t)

    def epsilon_from_velocity(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        rate, scale = self._eps_coeffs(t)
        return (rate * x - u) / scale

    def velocity_from_epsilon(self, t: float, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
        rate, scale = self._eps_coeffs(t)
        return rate * x - scale * eps

    def velocity_from_denoiser(self, t: float, x: np.ndarray, x1_hat: np.ndarray) -> np.ndarray:
        a, b = self.coeffs(t)
        return a * x + b * x1_hat

    def denoiser_from_velocity(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        a, b = self.coeffs(t)

        if b == 0.0:
            raise DegenerateScheduler(f"b(t) = 0 at t={t}; the denoiser is not recoverable")

        return (u - a * x) / b
