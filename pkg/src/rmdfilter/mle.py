from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
from dataclasses import dataclass
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from rmdfilter.common import (
    InvalidInputError, UnderIdentifiedError, ConvergenceError,
    DegenerateModelError, ModelTag,
)
from rmdfilter.statespace import TimeSeries, InclusionPath, LinearGaussianModel, _run_filter
from rmdfilter.models import ModelFamily, instantiate

__all__ = ('OptimizerSettings', 'MleFit', 'mle_fit', 'fit_theta', 'DEFAULT_INIT_VAR')

DEFAULT_INIT_VAR = 100.
"""Variance of the diffuse ``x_0`` prior (annualized-percent scale)"""

_MIN_SD = 1e-6
_BAD_OBJECTIVE = 1e12


@dataclass(frozen=True)
class OptimizerSettings:
    """Settings for the Nelder-Mead search in :func:`mle_fit`
    """
    max_iter: int = 500 #: Iterations per start point
    xatol: float = 1e-8 #: Simplex size tolerance
    fatol: float = 1e-8 #: Objective tolerance
    restart: bool = True
    """Restart once from the endpoint of a start that did not converge"""

    def __post_init__(self):
        if self.max_iter < 1:
            raise InvalidInputError('max_iter must be positive', self.max_iter)


@dataclass(frozen=True)
class MleFit:
    """Result of :func:`fit_theta`"""
    theta: np.ndarray #: Parameters in the family's natural order
    model: LinearGaussianModel
    loglik: float
    converged: bool
    n_iter: int #: Total simplex iterations over all starts


def _start_points(family: ModelFamily, values: np.ndarray) -> list[np.ndarray]:
    s = max(float(np.std(values)), 1e-2)
    ls = math.log(s)
    sd_starts = [
        (ls - math.log(2), ls - math.log(2)),
        (ls - math.log(4), ls),
        (ls, ls - math.log(4)),
    ]
    kappas = (0.9, 0.5, 0.97)
    mu = float(np.mean(values))
    starts = []
    for (a, b), kappa in zip(sd_starts, kappas):
        z = [a, b]
        lk = math.log(kappa / (1 - kappa))
        if family.tag == ModelTag.AR:
            z.extend([mu, lk])
        elif family.tag == ModelTag.ARMF:
            z.append(lk)
        elif family.tag == ModelTag.UC_T:
            z.append(math.log(family.t_dof - 2))
        starts.append(np.array(z))
    return starts

def _bounds(family: ModelFamily, values: np.ndarray) -> list[Tuple[Optional[float], Optional[float]]]:
    s = max(float(np.std(values)), 1e-2)
    sd_bound = (math.log(_MIN_SD), math.log(100 * s + 10))
    bounds = [sd_bound, sd_bound]
    if family.tag == ModelTag.AR:
        bounds.extend([(None, None), (-12., 12.)])
    elif family.tag == ModelTag.ARMF:
        bounds.append((-12., 12.))
    elif family.tag == ModelTag.UC_T:
        bounds.append((math.log(0.05), math.log(500.)))
    return bounds

def fit_theta(family: ModelFamily, series: TimeSeries, path: InclusionPath,
              opts: Optional[OptimizerSettings] = None) -> MleFit:
    """Maximum likelihood fit over the included observations of ``path``

    The same as :func:`mle_fit` but also returns the parameter vector and
    the maximized log-likelihood
    """
    if opts is None:
        opts = OptimizerSettings()
    series.check_path(path)
    n_incl = path.count
    if n_incl < family.min_obs:
        raise UnderIdentifiedError(
            f'{family} needs at least {family.min_obs} included observations', n_incl,
        )
    included = series.values[path.flags]
    init_mean = float(included[0])
    values, flags = series.values, path.flags

    def build(z):
        theta = family.from_unconstrained(z)
        return theta, instantiate(family, theta, init_mean, DEFAULT_INIT_VAR)

    def objective(z):
        try:
            _, model = build(z)
            _, _, ll = _run_filter(model, values, flags, keep=False)
        except (InvalidInputError, DegenerateModelError, OverflowError):
            return _BAD_OBJECTIVE
        if not math.isfinite(ll):
            return _BAD_OBJECTIVE
        return -ll

    options = dict(maxiter=opts.max_iter, xatol=opts.xatol, fatol=opts.fatol)
    bounds = _bounds(family, included)
    best = None
    any_converged = False
    n_iter = 0
    for x0 in _start_points(family, included):
        res = minimize(objective, x0, method='Nelder-Mead', bounds=bounds, options=options)
        n_iter += res.nit
        if not res.success and opts.restart:
            res = minimize(objective, res.x, method='Nelder-Mead', bounds=bounds, options=options)
            n_iter += res.nit
        any_converged |= bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    theta, model = build(best.x)
    loglik = -float(best.fun)
    if not any_converged:
        logger.debug(f'no start converged for {family} (n={n_incl})')
        raise ConvergenceError('Optimizer did not converge', best=model, loglik=loglik)
    return MleFit(theta=theta, model=model, loglik=loglik, converged=any_converged, n_iter=n_iter)

def mle_fit(family: ModelFamily, series: TimeSeries, path: InclusionPath,
            opts: Optional[OptimizerSettings] = None) -> LinearGaussianModel:
    """Fit a model family by maximum likelihood on the included observations

    The log-likelihood of :func:`~rmdfilter.statespace.filter_series` is
    maximized with a Nelder-Mead simplex from three fixed start points scaled
    to the data, on log standard deviations (and logit ``kappa``). The
    ``x_0`` prior is centered on the first included observation with
    variance :data:`DEFAULT_INIT_VAR`.

    Arguments:
        family: The model family
        series: The observations
        path: Which observations are included
        opts: Optimizer settings

    Raises:
        UnderIdentifiedError: If fewer than :attr:`ModelFamily.min_obs`
            observations are included
        ConvergenceError: If no start point converges. The best model found is
            available as :attr:`ConvergenceError.best`
    """
    return fit_theta(family, series, path, opts).model
