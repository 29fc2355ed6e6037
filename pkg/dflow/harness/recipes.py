"""Desk-scale priors, corruption operators and synthetic observations.
"""
import math
from typing import List, Optional, Tuple

import numpy as np
from attrdict import AttrDict
from hydra import log

from ..flow.base import DimensionMismatch
from ..flow.prior import FlowField, TargetPrior
from ..flow.scheduler import Scheduler
from ..flow.solver import Scheme, solve_forward
from ..opt.objective import CorruptionOp, CostSpec, LevelFunction, Regularizer
from ..schemas import CorruptionSection, CostSection, PriorSection
from ..util.io import read_matrix

__all__ = (
    "two_gaussians", "gaussian_grid", "ring", "ring_points", "empirical_from_file",
    "make_prior", "make_field", "make_corruption", "default_regularizers", "make_cost",
    "synth_observation",
)

CHI_D_WEIGHT = 0.01


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def two_gaussians(sep: float = 4.0, s: float = 0.5, dim: int = 2) -> TargetPrior:
    means = np.zeros((2, dim))
    means[:, 0] = -sep / 2.0, sep / 2.0
    return TargetPrior.mixture(means, s ** 2)


def gaussian_grid(k: int = 3, s: float = 0.5, spacing: float = 2.0, dim: int = 2) -> TargetPrior:
    if dim < 2:
        raise DimensionMismatch(f"A Gaussian grid needs d >= 2, got {dim}.")

    axis = (np.arange(k) - (k - 1) / 2.0) * spacing
    means = np.zeros((k * k, dim))
    means[:, 0] = np.repeat(axis, k)
    means[:, 1] = np.tile(axis, k)
    return TargetPrior.mixture(means, s ** 2)


def ring_points(m: int = 8, radius: float = 1.0, dim: int = 2) -> np.ndarray:
    """m equally spaced points of a circle of the given radius.

    For d > 2 the circle lies in the plane of the orthonormal pair
    sqrt(2/d) cos(2 pi i / d), sqrt(2/d) sin(2 pi i / d), so every point is a
    smooth length-d signal of norm radius.
    """
    if dim < 2:
        raise DimensionMismatch(f"A ring needs d >= 2, got {dim}.")

    theta = 2.0 * math.pi * np.arange(m) / m
    circle = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)

    if dim == 2:
        return circle

    phase = 2.0 * math.pi * np.arange(dim) / dim
    basis = math.sqrt(2.0 / dim) * np.stack([np.cos(phase), np.sin(phase)])
    return circle @ basis


def ring(m: int = 8, radius: float = 1.0, dim: int = 2) -> TargetPrior:
    return TargetPrior.empirical(ring_points(m, radius, dim))


def empirical_from_file(path: str, weights_path: Optional[str] = None) -> TargetPrior:
    points = read_matrix(path)
    weights = read_matrix(weights_path).reshape(-1) if weights_path else None
    return TargetPrior.empirical(points, weights)


def make_prior(section: PriorSection) -> TargetPrior:
    recipe = section.recipe
    d = section.dim

    if recipe == PriorSection.Recipe.TWO_GAUSSIANS:
        prior = two_gaussians(section.sep, section.s, d)
    elif recipe == PriorSection.Recipe.GAUSSIAN_GRID:
        prior = gaussian_grid(section.k, section.s, section.spacing, d)
    elif recipe == PriorSection.Recipe.RING:
        prior = ring(section.m, section.radius, d)
    elif recipe == PriorSection.Recipe.EMPIRICAL_FROM_FILE:
        prior = empirical_from_file(section.path, section.weights_path)
    elif recipe == PriorSection.Recipe.STANDARD_NORMAL:
        prior = TargetPrior.standard_normal(d)
    elif recipe == PriorSection.Recipe.SINGLE_POINT:
        prior = TargetPrior.empirical(np.zeros((1, d)) if section.point is None else [section.point])
    else:
        mean = np.zeros(d) if section.mean is None else np.asarray(section.mean, dtype=float)
        cov = np.ones(d) if section.cov_diag is None else np.asarray(section.cov_diag, dtype=float)
        prior = TargetPrior.gaussian(mean, np.diag(cov))

    if prior.dim != d:
        raise DimensionMismatch(f"prior.dim is {d} but the {recipe.value} prior has d={prior.dim}.")

    log.debug(f"recipes: {recipe.value} -> {prior}")
    return prior


def make_field(conf: AttrDict) -> FlowField:
    scheduler = Scheduler.by_name(conf.scheduler.kind, t_max=conf.scheduler.t_max, t_min=conf.scheduler.t_min)
    return FlowField(make_prior(conf.prior), scheduler)


def _keep_mask(section: CorruptionSection, dim: int, seed: int) -> np.ndarray:
    keep = np.zeros(dim, dtype=bool)

    if section.keep is not None:
        index = np.asarray(section.keep, dtype=int)

        if np.any(index < 0) or np.any(index >= dim):
            raise DimensionMismatch(f"Mask indices must lie in [0, {dim}).")

        keep[index] = True
        return keep

    count = max(1, int(round(section.keep_fraction * dim)))
    mode = section.keep_mode

    if mode == CorruptionSection.KeepMode.PREFIX:
        keep[:count] = True
    elif mode == CorruptionSection.KeepMode.CENTER:
        start = (dim - count) // 2
        keep[start:start + count] = True
    elif mode == CorruptionSection.KeepMode.ALTERNATE:
        keep[np.round(np.linspace(0, dim - 1, count)).astype(int)] = True
    else:
        keep[_rng(seed, 3).choice(dim, size=count, replace=False)] = True

    return keep


def make_corruption(section: CorruptionSection, dim: int, seed: int = 0) -> CorruptionOp:
    kind = section.kind

    if kind == CorruptionOp.Kind.MASK:
        return CorruptionOp.mask(_keep_mask(section, dim, seed), noise_sigma=section.noise_sigma)

    if kind == CorruptionOp.Kind.SUBSAMPLE:
        return CorruptionOp.subsample(dim, section.factor, noise_sigma=section.noise_sigma)

    if kind == CorruptionOp.Kind.BLUR1D:
        kernel = section.kernel if section.kernel else read_matrix(section.kernel_path).reshape(-1)
        return CorruptionOp.blur1d(dim, kernel, noise_sigma=section.noise_sigma)

    return CorruptionOp.identity(dim, noise_sigma=section.noise_sigma)


def default_regularizers(section: CostSection) -> List[Regularizer]:
    """Configured regularizers, or chi_d at 0.01 for noisy observations and none otherwise.
    """
    printed = section.chi_d_printed_sign

    if section.regularizers is not None:
        return [Regularizer(r.kind, r.weight, printed_sign=printed) for r in section.regularizers]

    if section.corruption.noise_sigma > 0.0:
        return [Regularizer(Regularizer.Kind.CHI_D, CHI_D_WEIGHT, printed_sign=printed)]

    return []


def synth_observation(prior: TargetPrior, field: FlowField, h: CorruptionOp, seed: int,
                      source: CostSection.Source = CostSection.Source.PRIOR, n_steps: int = 100,
                      scheme: Scheme = Scheme.MIDPOINT) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a ground truth x*, return (x*, H x* + sigma_y noise).

    With source 'flow' x* is the forward sample of a hidden standard normal
    source point, so a zero-cost solution is reachable.
    """
    if source == CostSection.Source.FLOW:
        hidden = _rng(seed, 1).standard_normal(prior.dim)
        x_star = solve_forward(field, hidden, n_steps, scheme, store=False).terminal
    else:
        x_star = prior.sample(_rng(seed, 1), 1)[0]

    y = h.apply(x_star)

    if h.noise_sigma > 0.0:
        y = y + h.noise_sigma * _rng(seed, 2).standard_normal(y.size)

    return x_star, y


def make_cost(section: CostSection, field: FlowField, seed: int, n_steps: int,
              scheme: Scheme = Scheme.MIDPOINT) -> Tuple[CostSpec, Optional[np.ndarray]]:
    """CostSpec for one experiment cell and its ground truth, when there is one.
    """
    d = field.dim
    regularizers = default_regularizers(section)
    target = None if section.target is None else np.asarray(section.target, dtype=float)

    if target is not None and target.size != d:
        raise DimensionMismatch(f"cost.target has {target.size} entries for d={d}.")

    if section.kind == CostSpec.Kind.LEVEL_SET:
        level = LevelFunction(section.level_function, section.level_coef)
        return CostSpec(section.kind, level=level, level_target=section.level_c, regularizers=regularizers), None

    if section.kind == CostSpec.Kind.REVERSED_SAMPLING:
        if target is None:
            identity = CorruptionOp.identity(d)
            target, _ = synth_observation(field.prior, field, identity, seed, CostSection.Source.FLOW, n_steps, scheme)

        return CostSpec(section.kind, y=target, regularizers=regularizers), target

    h = make_corruption(section.corruption, d, seed)

    if target is not None:
        x_star = target
        y = h.apply(target)

        if h.noise_sigma > 0.0:
            y = y + h.noise_sigma * _rng(seed, 2).standard_normal(y.size)
    else:
        x_star, y = synth_observation(field.prior, field, h, seed, section.source, n_steps, scheme)

    spec = CostSpec(
        section.kind,
        y=y,
        corruption=h,
        peak=section.peak,
        pseudo_inverse=section.pseudo_inverse,
        regularizers=regularizers,
    )

    return spec, x_star
