"""Exact scalar linear-Gaussian filtering with arbitrary missing-observation
patterns

The state and measurement equations are::

    x_t = state_const + state_coef * x_{t-1} + e_t,    e_t ~ N(0, state_sd**2)
    y_t = x_t + n_t,                                   n_t ~ N(0, obs_sd**2)

with ``x_0 ~ N(init_mean, init_var)``. Observations flagged as excluded by an
:class:`InclusionPath` only advance the state (predict-only steps).
"""
from __future__ import annotations
import dataclasses
from dataclasses import dataclass, field
import math
from typing import Optional, Sequence, Tuple, Iterator

import numpy as np
from scipy.special import logsumexp

from rmdfilter.common import (
    InvalidInputError, DegenerateModelError, parse_quarter, quarter_range,
)

__all__ = (
    'VAR_FLOOR', 'TimeSeries', 'InclusionPath', 'GaussianBelief',
    'MeasurementMixture', 'LinearGaussianModel', 'FilterOutput',
    'ForecastMixture', 'Forecast', 'kalman_step', 'filter_series', 'forecast',
    'forecast_average_moments',
)

VAR_FLOOR: float = 1e-10
"""Lower bound applied to predictive variances inside the filter"""

_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class TimeSeries:
    """Ordered scalar observations with quarterly calendar labels
    """
    index: Tuple[str, ...] #: Quarter labels (``YYYYQn``), strictly increasing
    values: np.ndarray #: Observed values

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise InvalidInputError('TimeSeries values must be one-dimensional', values.shape)
        index = tuple(self.index)
        if len(values) < 1:
            raise InvalidInputError('TimeSeries must not be empty')
        if len(index) != len(values):
            raise InvalidInputError(
                f'Index length {len(index)} does not match values', len(values),
            )
        if not np.isfinite(values).all():
            raise InvalidInputError('TimeSeries values must be finite')
        ordinals = [parse_quarter(s) for s in index]
        if any(b <= a for a, b in zip(ordinals, ordinals[1:])):
            raise InvalidInputError('TimeSeries index must be strictly increasing')
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'index', index)

    @classmethod
    def from_values(cls, values: Sequence[float], start: str = '1960Q2') -> TimeSeries:
        """Create an instance with consecutive quarter labels from ``start``

        >>> s = TimeSeries.from_values([1., 2., 3.], start='2000Q4')
        >>> s.index
        ('2000Q4', '2001Q1', '2001Q2')
        """
        values = np.asarray(values, dtype=float)
        return cls(tuple(quarter_range(start, len(values))), values)

    @property
    def is_contiguous(self) -> bool:
        """``True`` if no quarters are skipped"""
        ordinals = [parse_quarter(s) for s in self.index]
        return all(b - a == 1 for a, b in zip(ordinals, ordinals[1:]))

    def position(self, label: str) -> int:
        """Position of the first label at or after the given quarter label
        """
        target = parse_quarter(label)
        for i, s in enumerate(self.index):
            if parse_quarter(s) >= target:
                return i
        raise InvalidInputError('Label is past the end of the series', label)

    def head(self, n: int) -> TimeSeries:
        """The first ``n`` observations"""
        if not 1 <= n <= len(self):
            raise InvalidInputError('Invalid head length', n)
        return TimeSeries(self.index[:n], self.values[:n])

    def subset(self, path: InclusionPath) -> np.ndarray:
        """Values at the included positions of ``path``"""
        self.check_path(path)
        return self.values[path.flags]

    def check_path(self, path: InclusionPath):
        if len(path) != len(self):
            raise InvalidInputError(
                f'InclusionPath length {len(path)} does not match series', len(self),
            )

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class InclusionPath:
    """Boolean flags marking which observations are treated as informative

    >>> p = InclusionPath.full(3)
    >>> p.count, len(p)
    (3, 3)
    """
    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags).astype(bool)
        if flags.ndim != 1:
            raise InvalidInputError('InclusionPath flags must be one-dimensional')
        object.__setattr__(self, 'flags', flags)

    @classmethod
    def full(cls, n: int) -> InclusionPath:
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def empty(cls, n: int) -> InclusionPath:
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def from_positions(cls, n: int, positions: Sequence[int]) -> InclusionPath:
        flags = np.zeros(n, dtype=bool)
        flags[np.asarray(positions, dtype=int)] = True
        return cls(flags)

    @property
    def count(self) -> int:
        """Number of included observations"""
        return int(self.flags.sum())

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def __len__(self):
        return len(self.flags)

    def __eq__(self, other):
        if not isinstance(other, InclusionPath):
            return NotImplemented
        return len(self) == len(other) and bool((self.flags == other.flags).all())

    def __hash__(self):
        return hash(self.flags.tobytes())


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian distribution of the latent state"""
    mean: float
    var: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.var)):
            raise InvalidInputError('Belief moments must be finite', (self.mean, self.var))
        if self.var < 0:
            raise InvalidInputError('Belief variance must be nonnegative', self.var)


@dataclass(frozen=True)
class MeasurementMixture:
    """A fixed Gaussian scale mixture for the measurement noise

    Component ``k`` has variance ``obs_sd**2 * scales[k]``. The scales are
    normalized so the mixture variance equals ``obs_sd**2``.
    """
    weights: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        s = np.asarray(self.scales, dtype=float)
        if w.shape != s.shape or w.ndim != 1 or not len(w):
            raise InvalidInputError('Mixture weights and scales must match')
        if not (np.isfinite(w).all() and np.isfinite(s).all()):
            raise InvalidInputError('Mixture weights and scales must be finite', (w, s))
        if (w < 0).any() or (s <= 0).any() or not w.sum() > 0:
            raise InvalidInputError('Mixture weights must be >= 0 and scales > 0')
        w = w / w.sum()
        s = s / float(np.dot(w, s))
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'scales', s)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class LinearGaussianModel:
    """Scalar state-space model parameters
    """
    state_const: float #: Drift constant ``c``
    state_coef: float #: Autoregressive coefficient ``a``
    state_sd: float #: State innovation standard deviation
    obs_sd: float #: Measurement noise standard deviation
    init_mean: float = 0. #: Mean of ``x_0``
    init_var: float = 100. #: Variance of ``x_0``
    obs_mixture: Optional[MeasurementMixture] = field(default=None, compare=False)
    """Optional scale mixture replacing the Gaussian measurement noise"""

    def __post_init__(self):
        vals = (self.state_const, self.state_coef, self.state_sd, self.obs_sd,
                self.init_mean, self.init_var)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError('Model parameters must be finite', vals)
        if self.state_sd < 0 or self.obs_sd < 0 or self.init_var < 0:
            raise InvalidInputError(
                'Standard deviations and init_var must be nonnegative', vals,
            )

    @property
    def initial_belief(self) -> GaussianBelief:
        return GaussianBelief(self.init_mean, self.init_var)

    def with_init(self, mean: float, var: float) -> LinearGaussianModel:
        """Copy of the model with a different ``x_0`` prior"""
        return dataclasses.replace(self, init_mean=float(mean), init_var=float(var))

    def obs_components(self) -> Tuple[np.ndarray, np.ndarray]:
        """Log weights and variances of the measurement noise components"""
        r2 = self.obs_sd ** 2
        if self.obs_mixture is None:
            return np.zeros(1), np.array([r2])
        mix = self.obs_mixture
        with np.errstate(divide='ignore'):
            logw = np.log(mix.weights)
        return logw, r2 * mix.scales


@dataclass
class FilterOutput:
    """Result of :func:`filter_series`"""
    filtered: list[GaussianBelief] #: Filtered belief at every time step
    loglik: float #: Log density of the included observations

    @property
    def means(self) -> np.ndarray:
        return np.array([b.mean for b in self.filtered])

    @property
    def vars(self) -> np.ndarray:
        return np.array([b.var for b in self.filtered])

    @property
    def final(self) -> GaussianBelief:
        return self.filtered[-1]


@dataclass(frozen=True)
class ForecastMixture:
    """A finite mixture of Gaussians used as a predictive density
    """
    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_1d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.vars, dtype=float))
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or not len(w):
            raise InvalidInputError('Mixture components must have equal length')
        if (w < 0).any() or (v < 0).any():
            raise InvalidInputError('Mixture weights and variances must be nonnegative')
        if abs(w.sum() - 1) > 1e-12:
            raise InvalidInputError('Mixture weights must sum to 1', float(w.sum()))
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'means', m)
        object.__setattr__(self, 'vars', v)

    @classmethod
    def from_components(cls, weights, means, vars) -> ForecastMixture:
        """Create an instance, normalizing the weights first"""
        w = np.ravel(np.asarray(weights, dtype=float))
        w = w / w.sum()
        return cls(w, np.ravel(means), np.ravel(vars))

    @classmethod
    def equal_weight(cls, means, vars) -> ForecastMixture:
        n = len(np.atleast_1d(means))
        return cls(np.full(n, 1 / n), means, vars)

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    @property
    def var(self) -> float:
        m = self.mean
        return float(np.dot(self.weights, self.vars + (self.means - m) ** 2))

    def logpdf(self, y: float) -> float:
        """Log density at ``y`` (point-mass components are ignored)"""
        v = np.maximum(self.vars, VAR_FLOOR)
        logp = -0.5 * (_LOG_2PI + np.log(v) + (y - self.means) ** 2 / v)
        with np.errstate(divide='ignore'):
            return float(logsumexp(logp, b=self.weights))

    def pdf(self, y: float) -> float:
        return math.exp(self.logpdf(y))

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class Forecast:
    """Result of :func:`forecast`"""
    step_means: np.ndarray #: Predictive means of ``y_{t+1}..y_{t+h}``
    step_vars: np.ndarray #: Predictive variances of ``y_{t+1}..y_{t+h}``
    average: GaussianBelief #: Predictive of the h-step average

    @property
    def horizon(self) -> int:
        return len(self.step_means)


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise InvalidInputError('Non-finite input', v)

def _update(m: float, P: float, y: float, logw: np.ndarray, obs_vars: np.ndarray,
            ) -> Tuple[float, float, float]:
    """Measurement update of a predicted belief ``(m, P)``

    Returns the posterior mean, variance and the log predictive density of y
    """
    if len(obs_vars) == 1:
        r2 = float(obs_vars[0])
        S = P + r2
        if P == 0 and r2 == 0:
            raise DegenerateModelError('Zero predictive variance', (m, P))
        S = max(S, VAR_FLOOR)
        e = y - m
        K = P / S
        ll = -0.5 * (_LOG_2PI + math.log(S) + e * e / S)
        return m + K * e, max(P - K * P, 0.), ll
    S = np.maximum(P + obs_vars, VAR_FLOOR)
    e = y - m
    comp_ll = logw - 0.5 * (_LOG_2PI + np.log(S) + e * e / S)
    ll = float(logsumexp(comp_ll))
    rho = np.exp(comp_ll - ll)
    means = m + P / S * e
    vars = np.maximum(P - P * P / S, 0.)
    mean = float(np.dot(rho, means))
    var = float(np.dot(rho, vars + (means - mean) ** 2))
    return mean, var, ll

def _run_filter(model: LinearGaussianModel, values: np.ndarray, flags: np.ndarray,
                keep: bool = True) -> Tuple[np.ndarray, np.ndarray, float]:
    c, a = model.state_const, model.state_coef
    q2 = model.state_sd ** 2
    logw, obs_vars = model.obs_components()
    m, P = model.init_mean, model.init_var
    n = len(values)
    means = np.empty(n) if keep else None
    vars = np.empty(n) if keep else None
    loglik = 0.
    for t in range(n):
        m = c + a * m
        P = a * a * P + q2
        if flags[t]:
            m, P, ll = _update(m, P, float(values[t]), logw, obs_vars)
            loglik += ll
        if keep:
            means[t] = m
            vars[t] = P
    return means, vars, loglik

def kalman_step(belief: GaussianBelief, model: LinearGaussianModel,
                obs: Optional[float] = None) -> Tuple[GaussianBelief, float]:
    """Advance a belief one time step and optionally update on an observation

    Arguments:
        belief: The filtered belief at ``t - 1``
        model: The model
        obs: The observation at ``t``, or ``None`` for a predict-only step

    Returns:
        (GaussianBelief, float): belief, loglik_increment
            The belief at ``t`` and ``log N(obs; predictive)`` (``0`` if ``obs``
            is ``None``)

    Raises:
        InvalidInputError: If the belief or observation is not finite
        DegenerateModelError: If ``obs_sd`` and the predicted state variance
            are both zero

    >>> model = LinearGaussianModel(0., 1., 1., 1.)
    >>> kalman_step(GaussianBelief(0., 1.), model)
    (GaussianBelief(mean=0.0, var=2.0), 0.0)
    """
    _check_finite(belief.mean, belief.var)
    m = model.state_const + model.state_coef * belief.mean
    a = model.state_coef
    P = a * a * belief.var + model.state_sd ** 2
    if obs is None:
        return GaussianBelief(m, P), 0.
    _check_finite(obs)
    logw, obs_vars = model.obs_components()
    m, P, ll = _update(m, P, float(obs), logw, obs_vars)
    return GaussianBelief(m, P), ll

def filter_series(model: LinearGaussianModel, series: TimeSeries,
                  path: InclusionPath) -> FilterOutput:
    """Run the filter over a series, skipping excluded observations

    Excluded times still produce a (predict-only) filtered belief. The
    log-likelihood sums only over the included observations.
    """
    series.check_path(path)
    means, vars, loglik = _run_filter(model, series.values, path.flags)
    filtered = [GaussianBelief(float(m), float(v)) for m, v in zip(means, vars)]
    return FilterOutput(filtered, loglik)

def forecast_average_moments(state_const, state_coef, state_var, obs_var,
                             mean, var, h: int) -> Tuple[np.ndarray, np.ndarray]:
    """Moments of the h-step average ``(1/h) * sum(y_{t+1..t+h})``

    All arguments except ``h`` may be arrays (broadcast together), so one call
    handles every component of a mixture.

    Arguments:
        state_const: Drift constant ``c``
        state_coef: Autoregressive coefficient ``a``
        state_var: State innovation variance
        obs_var: Measurement noise variance
        mean: Filtered state mean at the forecast origin
        var: Filtered state variance at the forecast origin
        h: The horizon

    Returns:
        (ndarray, ndarray): mean, var
    """
    if h < 1:
        raise InvalidInputError('Forecast horizon must be >= 1', h)
    c, a, q2, r2, m, P = np.broadcast_arrays(*[
        np.asarray(v, dtype=float) for v in
        (state_const, state_coef, state_var, obs_var, mean, var)
    ])
    pow_j = np.ones_like(a)
    drift = np.zeros_like(a)
    coef_sum = np.zeros_like(a)
    mean_sum = np.zeros_like(a)
    geo = np.zeros_like(a)
    geo_sq_sum = np.zeros_like(a)
    for _ in range(h):
        drift = a * drift + c
        pow_j = pow_j * a
        mean_sum = mean_sum + pow_j * m + drift
        coef_sum = coef_sum + pow_j
        geo = 1 + a * geo
        geo_sq_sum = geo_sq_sum + geo * geo
    avg_mean = mean_sum / h
    avg_var = (coef_sum / h) ** 2 * P + q2 * geo_sq_sum / h ** 2 + r2 / h
    return avg_mean, avg_var

def forecast(model: LinearGaussianModel, belief: GaussianBelief, h: int) -> Forecast:
    """Predictive moments of ``y_{t+1}..y_{t+h}`` and of their average

    The average variance includes the covariance between horizons induced by
    the shared state path.

    With a :class:`MeasurementMixture` the predictive is moment-matched: the
    measurement noise enters with its variance ``obs_sd**2`` only, so the
    Gaussian returned has lighter tails than the scale mixture.

    >>> model = LinearGaussianModel(0., 1., 0., 0.)
    >>> fc = forecast(model, GaussianBelief(1.5, 0.), 4)
    >>> fc.average
    GaussianBelief(mean=1.5, var=0.0)
    """
    if h < 1:
        raise InvalidInputError('Forecast horizon must be >= 1', h)
    _check_finite(belief.mean, belief.var)
    c, a = model.state_const, model.state_coef
    q2, r2 = model.state_sd ** 2, model.obs_sd ** 2
    m, P = belief.mean, belief.var
    step_means = np.empty(h)
    step_vars = np.empty(h)
    for j in range(h):
        m = c + a * m
        P = a * a * P + q2
        step_means[j] = m
        step_vars[j] = P + r2
    avg_mean, avg_var = forecast_average_moments(c, a, q2, r2, belief.mean, belief.var, h)
    return Forecast(step_means, step_vars, GaussianBelief(float(avg_mean), float(avg_var)))
