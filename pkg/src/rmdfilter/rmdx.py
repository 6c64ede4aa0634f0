"""Exogenous randomization (RMD-X)

Inclusion paths with a fixed number ``[beta * T]`` of included observations
are drawn uniformly. The base model is fit and filtered independently on each
path and the results are averaged with equal weights.
"""
from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import itertools
import math
from typing import Optional, Sequence, Dict, Iterable

import numpy as np

from rmdfilter.common import (
    InvalidInputError, EmptySubsetError, UnderIdentifiedError,
    ConvergenceError, DegenerateModelError, EstimationFailure, ModelTag,
)
from rmdfilter.utils import stream, round_half_away
from rmdfilter.statespace import (
    TimeSeries, InclusionPath, LinearGaussianModel, ForecastMixture,
    filter_series, forecast, forecast_average_moments,
)
from rmdfilter.models import ModelFamily
from rmdfilter.mle import OptimizerSettings, fit_theta

__all__ = (
    'PathSampler', 'PathEstimate', 'RmdxResult', 'sample_paths',
    'enumerate_paths', 'rmd_x_estimate', 'DEFAULT_N_PATHS',
)

DEFAULT_N_PATHS = 200
MIN_SUCCESS_FRACTION = 0.1
"""Fewest successful paths (as a fraction of those sampled) for a result"""


def _subset_size(T: int, beta: float) -> int:
    if not math.isfinite(beta) or not 0 <= beta <= 1:
        raise InvalidInputError('beta must be in [0, 1]', beta)
    if beta == 0:
        raise EmptySubsetError('RMD-X is undefined for beta = 0', beta)
    return round_half_away(beta * T)


@dataclass(frozen=True)
class PathSampler:
    """Uniform sampler of fixed-size inclusion paths

    >>> sampler = PathSampler(T=10, beta=0.5, n_paths=3, seed=1)
    >>> sampler.size
    5
    >>> [p.count for p in sample_paths(sampler)]
    [5, 5, 5]
    """
    T: int #: Series length
    beta: float #: Inclusion probability
    n_paths: int #: Number of paths to draw
    seed: int #: Master seed. Path ``i`` uses ``stream(seed, i)``
    floor: int = 1
    """Fewest included observations allowed (the family's identifiability
    floor)"""

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError('T must be positive', self.T)
        if self.n_paths < 1:
            raise InvalidInputError('n_paths must be positive', self.n_paths)

    @property
    def size(self) -> int:
        """``[beta * T]``, rounded half away from zero"""
        return _subset_size(self.T, self.beta)


def sample_paths(sampler: PathSampler) -> list[InclusionPath]:
    """Draw :attr:`PathSampler.n_paths` inclusion paths

    Each path includes exactly :attr:`PathSampler.size` positions, drawn
    uniformly without replacement from an independent stream per path.

    Raises:
        EmptySubsetError: If ``beta == 0``
        UnderIdentifiedError: If the subset size is below the floor
    """
    k = sampler.size
    if k < max(sampler.floor, 1):
        raise UnderIdentifiedError(
            f'Subset size {k} is below the floor {sampler.floor}', k,
        )
    T = sampler.T
    if k == T:
        return [InclusionPath.full(T) for _ in range(sampler.n_paths)]
    paths = []
    for i in range(sampler.n_paths):
        rng = stream(sampler.seed, i)
        positions = rng.choice(T, size=k, replace=False)
        paths.append(InclusionPath.from_positions(T, positions))
    return paths

def enumerate_paths(T: int, beta: float) -> list[InclusionPath]:
    """Every inclusion path of size ``[beta * T]``, in lexicographic order

    >>> len(enumerate_paths(8, 0.5))
    70
    """
    k = _subset_size(T, beta)
    if k < 1:
        raise UnderIdentifiedError('Subset size is zero', k)
    return [InclusionPath.from_positions(T, c) for c in itertools.combinations(range(T), k)]


@dataclass
class PathEstimate:
    """Estimation result for a single inclusion path"""
    path: InclusionPath
    model: LinearGaussianModel
    theta: Optional[np.ndarray] #: ``None`` when the model was given
    loglik: float #: Log-likelihood of the included observations
    filtered_means: np.ndarray
    filtered_vars: np.ndarray
    step_means: np.ndarray #: Predictive means for ``y_{T+1}..y_{T+h_max}``
    step_vars: np.ndarray
    average_moments: Dict[int, tuple] = field(default_factory=dict)
    """Mean and variance of the h-step average forecast per horizon
    (moment-matched for scale-mixture measurements)"""


@dataclass
class RmdxResult:
    """Aggregated RMD-X estimates
    """
    beta: float
    theta_bar: Optional[np.ndarray]
    """Aggregated parameters (``None`` when the model was given)"""

    x_bar: np.ndarray #: Equal-weight mean of the filtered state means
    x_var: np.ndarray
    """Variance of the equal-weight mixture of filtered states"""

    forecast_bar: np.ndarray
    """Aggregated point forecast of ``y_{T+h}`` for ``h = 1..h_max``"""

    forecast_mixture: ForecastMixture
    """One-step-ahead predictive density (equal-weight mixture over paths)"""

    average_mixtures: Dict[int, ForecastMixture]
    """Predictive density of the h-step average for each horizon"""

    n_paths: int #: Number of paths attempted
    n_failed: int #: Paths dropped after an estimation failure
    per_path: Optional[list[PathEstimate]] = None

    @property
    def n_success(self) -> int:
        return self.n_paths - self.n_failed

    def average_forecast(self, h: int) -> float:
        """Aggregated point forecast of the h-step average"""
        return self.average_mixtures[h].mean


def _estimate_path(family: ModelFamily, series: TimeSeries, path: InclusionPath,
                   model: Optional[LinearGaussianModel], opts: OptimizerSettings,
                   h_max: int, horizons: Sequence[int]) -> Optional[PathEstimate]:
    theta = None
    try:
        if model is None:
            fit = fit_theta(family, series, path, opts)
            model, theta = fit.model, fit.theta
        out = filter_series(model, series, path)
    except (ConvergenceError, UnderIdentifiedError, DegenerateModelError) as exc:
        logger.debug(f'path dropped: {exc}')
        return None
    fc = forecast(model, out.final, h_max)
    avg = {}
    for h in horizons:
        m, v = forecast_average_moments(
            model.state_const, model.state_coef, model.state_sd ** 2,
            model.obs_sd ** 2, out.final.mean, out.final.var, h,
        )
        avg[h] = (float(m), float(v))
    return PathEstimate(
        path=path, model=model, theta=theta, loglik=out.loglik,
        filtered_means=out.means, filtered_vars=out.vars,
        step_means=fc.step_means, step_vars=fc.step_vars, average_moments=avg,
    )

def _aggregate_theta(family: ModelFamily, thetas: np.ndarray, theta_scale: str) -> np.ndarray:
    if len(thetas) == 1:
        return thetas[0].copy()
    if theta_scale == 'natural':
        return thetas.mean(axis=0)
    out = thetas.mean(axis=0)
    log_cols = [0, 1]
    if family.tag == ModelTag.UC_T:
        out[2] = 2 + math.exp(np.log(thetas[:, 2] - 2).mean())
    with np.errstate(divide='ignore'):
        out[log_cols] = np.exp(np.log(thetas[:, log_cols]).mean(axis=0))
    return out

def rmd_x_estimate(
    family: ModelFamily, series: TimeSeries, beta: float,
    n_paths: int = DEFAULT_N_PATHS, h_max: int = 12, seed: int = 0, *,
    model: Optional[LinearGaussianModel] = None,
    paths: Optional[Sequence[InclusionPath]] = None,
    theta_scale: str = 'log', threads: int = 1,
    horizons: Optional[Iterable[int]] = None,
    opts: Optional[OptimizerSettings] = None,
    keep_per_path: bool = False,
) -> RmdxResult:
    """Estimate, filter and forecast by averaging over random inclusion paths

    Arguments:
        family: The model family
        series: The observations
        beta: Inclusion probability in ``(0, 1]``
        n_paths: Number of sampled paths
        h_max: Longest horizon for the per-step forecasts
        seed: Master seed for the path streams
        model: If given, skip estimation and filter every path with this
            model (known parameters)
        paths: Use these paths instead of sampling (e.g. from
            :func:`enumerate_paths`)
        theta_scale: ``'log'`` to average standard deviations on the log
            scale, ``'natural'`` to average every parameter directly
        threads: Worker threads for the per-path work. Results do not depend
            on this value
        horizons: Horizons of the h-step average forecasts. Defaults to
            ``1..h_max``
        opts: Optimizer settings for :func:`~rmdfilter.mle.fit_theta`
        keep_per_path: Keep every :class:`PathEstimate` in the result

    Raises:
        EmptySubsetError: If ``beta == 0``
        UnderIdentifiedError: If ``[beta * T]`` is below the family's floor
        EstimationFailure: If fewer than 10% of the paths (or none) succeed
    """
    if theta_scale not in ('log', 'natural'):
        raise InvalidInputError('theta_scale must be "log" or "natural"', theta_scale)
    if h_max < 1:
        raise InvalidInputError('h_max must be >= 1', h_max)
    horizons = tuple(range(1, h_max + 1)) if horizons is None else tuple(sorted(set(horizons)))
    if any(h < 1 for h in horizons):
        raise InvalidInputError('Horizons must be >= 1', horizons)
    if opts is None:
        opts = OptimizerSettings()
    T = len(series)
    if paths is None:
        floor = 1 if model is not None else family.min_obs
        sampler = PathSampler(T=T, beta=beta, n_paths=n_paths, seed=seed, floor=floor)
        if sampler.size == T:
            paths = sample_paths(PathSampler(T, beta, 1, seed, floor))
        else:
            paths = sample_paths(sampler)
    else:
        paths = list(paths)
        for p in paths:
            series.check_path(p)
    logger.debug(f'rmd-x {family} beta={beta}: {len(paths)} paths, threads={threads}')

    def work(path):
        return _estimate_path(family, series, path, model, opts, h_max, horizons)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            slots = list(pool.map(work, paths))
    else:
        slots = [work(p) for p in paths]
    results = [r for r in slots if r is not None]
    n_failed = len(slots) - len(results)
    if n_failed:
        logger.warning(f'rmd-x {family} beta={beta}: dropped {n_failed} of {len(slots)} paths')
    if not results or len(results) < MIN_SUCCESS_FRACTION * len(slots):
        raise EstimationFailure(
            f'Only {len(results)} of {len(slots)} paths succeeded', len(results),
        )

    means = np.stack([r.filtered_means for r in results])
    vars = np.stack([r.filtered_vars for r in results])
    x_bar = means.mean(axis=0)
    x_var = (vars + means ** 2).mean(axis=0) - x_bar ** 2
    step_means = np.stack([r.step_means for r in results])
    step_vars = np.stack([r.step_vars for r in results])
    if model is None:
        theta_bar = _aggregate_theta(family, np.stack([r.theta for r in results]), theta_scale)
    else:
        theta_bar = None
    average_mixtures = {}
    for h in horizons:
        m = np.array([r.average_moments[h][0] for r in results])
        v = np.array([r.average_moments[h][1] for r in results])
        average_mixtures[h] = ForecastMixture.equal_weight(m, v)
    return RmdxResult(
        beta=beta, theta_bar=theta_bar, x_bar=x_bar, x_var=np.maximum(x_var, 0.),
        forecast_bar=step_means.mean(axis=0),
        forecast_mixture=ForecastMixture.equal_weight(step_means[:, 0], step_vars[:, 0]),
        average_mixtures=average_mixtures,
        n_paths=len(slots), n_failed=n_failed,
        per_path=results if keep_per_path else None,
    )
