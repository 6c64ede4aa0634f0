"""Endogenous randomization (RMD-N)

A sequential posterior over the state, the parameters and the inclusion
indicators. Each parameter particle carries an exact Gaussian-sum filter over
the state, one component per surviving inclusion history. At every step each
component branches into an include branch (Kalman update, weight
``beta * f / F``) and an exclude branch (predict only, weight ``1 - beta``),
where ``F`` is the one-step predictive density of the whole system.
"""
from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
from dataclasses import dataclass, field
import math
from typing import Optional, Sequence, Dict, Tuple, Iterable

import numpy as np
from scipy.special import logsumexp
from scipy import stats

from pydispatch import Dispatcher

from rmdfilter.common import (
    ModelTag, InvalidInputError, FilterDegeneracyError,
    InvalidStateError,
)
from rmdfilter.utils import stream
from rmdfilter.statespace import (
    VAR_FLOOR, TimeSeries, LinearGaussianModel, ForecastMixture,
    forecast_average_moments,
)
from rmdfilter.models import ModelFamily, instantiate, NAIVE_TARGET
from rmdfilter.mle import DEFAULT_INIT_VAR

__all__ = (
    'ThetaPrior', 'RmdnConfig', 'ThetaParticle', 'ThetaParticleSystem',
    'SmoothedInclusion', 'AverageForecast', 'StepSummary',
    'predictive_density', 'rmd_n_update', 'fit_rmd_n', 'smoothed_inclusion',
    'beta_hat', 'flag_outliers', 'weighted_quantile', 'OUTLIER_THRESHOLD',
)

OUTLIER_THRESHOLD = 0.005
"""Smoothed inclusion probability below which an observation is flagged"""

_LOG_2PI = math.log(2 * math.pi)

# stream purposes
_PRIOR, _INNER, _OUTER, _MOVE, _RERUN, _ACCEPT = range(6)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Quantiles of a weighted sample (inverse of the weighted empirical CDF)

    >>> float(weighted_quantile(np.array([1., 2., 3.]), np.ones(3), 0.5))
    2.0
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind='stable')
    v, w = values[order], weights[order]
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, np.asarray(q, dtype=float), side='left')
    return v[np.minimum(idx, len(v) - 1)]

def beta_hat(beta: float, F: float, f_j: float) -> float:
    """Filtered inclusion probability ``P(C_t = 1 | y^t)``

    Given the predictive density ``F`` of the observation and the density
    ``f_j`` assigned to it when excluded. Equals ``beta`` when ``f_j == F``.

    >>> beta_hat(0.25, 0.5, 0.5)
    0.25
    """
    num = beta * F
    den = num + (1 - beta) * f_j
    if den == 0:
        raise InvalidInputError('Both densities are zero', (F, f_j))
    return num / den


@dataclass(frozen=True)
class ThetaPrior:
    """Prior over the parameters of a model family

    Standard deviations are half-normal with scale :attr:`sd_scale`,
    ``kappa`` is uniform on ``(0, 1)``, ``mu`` is normal and ``log(dof - 2)``
    is normal around the family's default degrees of freedom.
    """
    family: ModelFamily
    sd_scale: float = 5.
    mu_mean: float = NAIVE_TARGET
    mu_sd: float = 2.
    log_dof_sd: float = 1.
    point_mass: Optional[np.ndarray] = None
    """If set, the prior is a point mass at this parameter vector"""

    @classmethod
    def create_point_mass(cls, family: ModelFamily, theta: Sequence[float]) -> ThetaPrior:
        return cls(family, point_mass=family.check_theta(theta))

    @property
    def is_point_mass(self) -> bool:
        return self.point_mass is not None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` parameter vectors (rows)"""
        if self.is_point_mass:
            return np.tile(self.point_mass, (n, 1))
        tag = self.family.tag
        cols = [
            np.abs(rng.normal(0, self.sd_scale, n)),
            np.abs(rng.normal(0, self.sd_scale, n)),
        ]
        if tag == ModelTag.AR:
            cols.append(rng.normal(self.mu_mean, self.mu_sd, n))
        if tag in (ModelTag.AR, ModelTag.ARMF):
            cols.append(rng.uniform(0, 1, n))
        elif tag == ModelTag.UC_T:
            cols.append(2 + np.exp(rng.normal(math.log(self.family.t_dof - 2), self.log_dof_sd, n)))
        return np.column_stack(cols)

    def logpdf_unconstrained(self, z: np.ndarray) -> np.ndarray:
        """Log prior density of unconstrained rows ``z`` (with Jacobians)"""
        z = np.atleast_2d(z)
        tag = self.family.tag
        out = np.zeros(len(z))
        for j in (0, 1):
            out += stats.halfnorm.logpdf(np.exp(z[:, j]), scale=self.sd_scale) + z[:, j]
        col = 2
        if tag == ModelTag.AR:
            out += stats.norm.logpdf(z[:, col], self.mu_mean, self.mu_sd)
            col += 1
        if tag in (ModelTag.AR, ModelTag.ARMF):
            u = z[:, col]
            out += -np.logaddexp(0, -u) - np.logaddexp(0, u)
        elif tag == ModelTag.UC_T:
            out += stats.norm.logpdf(z[:, col], math.log(self.family.t_dof - 2), self.log_dof_sd)
        return out


@dataclass(frozen=True)
class RmdnConfig:
    """Settings for :func:`fit_rmd_n`"""
    n_theta: int = 512 #: Number of parameter particles
    inner_cap: int = 64 #: Most inner components kept per particle
    ess_threshold: float = 0.5
    """Resample when the effective sample size drops below this fraction"""

    n_moves: int = 3 #: Random-walk Metropolis steps after each resampling
    proposal_scale: float = 0.5
    """Proposal covariance as a multiple of the weighted particle covariance"""

    seed: int = 0
    fixed_lag: Optional[int] = None
    """If set, the inclusion probability of ``t`` is frozen at ``t + fixed_lag``"""

    horizons: Tuple[int, ...] = (1,)
    """Horizons of the h-step average forecasts recorded at every step"""

    prior: Optional[ThetaPrior] = None

    def __post_init__(self):
        if self.n_theta < 1:
            raise InvalidInputError('n_theta must be positive', self.n_theta)
        if self.inner_cap < 1:
            raise InvalidInputError('inner_cap must be positive', self.inner_cap)
        if not 0 < self.ess_threshold <= 1:
            raise InvalidInputError('ess_threshold must be in (0, 1]', self.ess_threshold)
        if self.n_moves < 0:
            raise InvalidInputError('n_moves must be >= 0', self.n_moves)
        if self.fixed_lag is not None and self.fixed_lag < 1:
            raise InvalidInputError('fixed_lag must be positive', self.fixed_lag)
        object.__setattr__(self, 'horizons', tuple(sorted(set(self.horizons))))
        if any(h < 1 for h in self.horizons):
            raise InvalidInputError('Horizons must be >= 1', self.horizons)


@dataclass
class _Params:
    c: np.ndarray
    a: np.ndarray
    q2: np.ndarray
    r2: np.ndarray
    obs_logw: np.ndarray
    obs_var: np.ndarray

    @classmethod
    def from_models(cls, models: Sequence[LinearGaussianModel]) -> _Params:
        comps = [m.obs_components() for m in models]
        if len({len(w) for w, _ in comps}) != 1:
            raise InvalidInputError('Models must share the measurement mixture size')
        return cls(
            c=np.array([m.state_const for m in models]),
            a=np.array([m.state_coef for m in models]),
            q2=np.array([m.state_sd ** 2 for m in models]),
            r2=np.array([m.obs_sd ** 2 for m in models]),
            obs_logw=np.stack([w for w, _ in comps]),
            obs_var=np.stack([v for _, v in comps]),
        )

    def take(self, idx: np.ndarray) -> _Params:
        return _Params(*[getattr(self, f)[idx] for f in self.__dataclass_fields__])

    def put(self, mask: np.ndarray, other: _Params):
        for f in self.__dataclass_fields__:
            getattr(self, f)[mask] = getattr(other, f)[mask]


@dataclass
class _Inner:
    mean: np.ndarray #: (N, M)
    var: np.ndarray #: (N, M)
    logw: np.ndarray #: (N, M), each row normalized
    anc: np.ndarray #: (N, M, L) bool

    @classmethod
    def initial(cls, init_mean: np.ndarray, init_var: np.ndarray) -> _Inner:
        n = len(init_mean)
        return cls(
            mean=np.asarray(init_mean, dtype=float).reshape(n, 1).copy(),
            var=np.asarray(init_var, dtype=float).reshape(n, 1).copy(),
            logw=np.zeros((n, 1)),
            anc=np.zeros((n, 1, 0), dtype=bool),
        )

    def take(self, idx: np.ndarray) -> _Inner:
        return _Inner(self.mean[idx], self.var[idx], self.logw[idx], self.anc[idx])

    def put(self, mask: np.ndarray, other: _Inner):
        self.mean[mask] = other.mean[mask]
        self.var[mask] = other.var[mask]
        self.logw[mask] = other.logw[mask]
        self.anc[mask] = other.anc[mask]


def _predict(params: _Params, inner: _Inner) -> Tuple[np.ndarray, np.ndarray]:
    a = params.a[:, None]
    return params.c[:, None] + a * inner.mean, a * a * inner.var + params.q2[:, None]

def _measurement(params: _Params, m_pred: np.ndarray, P_pred: np.ndarray, y: float):
    """Per-component log density of ``y`` and the updated moments"""
    S = np.maximum(P_pred[..., None] + params.obs_var[:, None, :], VAR_FLOOR)
    e = y - m_pred
    comp_ll = params.obs_logw[:, None, :] - 0.5 * (_LOG_2PI + np.log(S) + (e * e)[..., None] / S)
    gain = P_pred[..., None] / S
    means = m_pred[..., None] + gain * e[..., None]
    vars = np.maximum(P_pred[..., None] * (1 - gain), 0.)
    if S.shape[-1] == 1:
        return comp_ll[..., 0], means[..., 0], vars[..., 0]
    logf = logsumexp(comp_ll, axis=2)
    rho = np.exp(comp_ll - logf[..., None])
    mean = (rho * means).sum(axis=2)
    var = (rho * (vars + (means - mean[..., None]) ** 2)).sum(axis=2)
    return logf, mean, var

def _log_predictive(log_outer: np.ndarray, params: _Params, inner: _Inner, y: float) -> float:
    m_pred, P_pred = _predict(params, inner)
    logf, _, _ = _measurement(params, m_pred, P_pred, y)
    return float(logsumexp(log_outer[:, None] + inner.logw + logf))

def _systematic_rows(logw: np.ndarray, n_out: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling applied independently to every row"""
    N, M = logw.shape
    w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    cum = np.cumsum(w, axis=1)
    cum[:, -1] = 1.
    rows = np.arange(N)[:, None]
    u = (rng.random(N)[:, None] + np.arange(n_out)) / n_out
    flat = np.searchsorted((cum + rows).ravel(), (u + rows).ravel(), side='right')
    idx = flat.reshape(N, n_out) - rows * M
    return np.clip(idx, 0, M - 1)

def _systematic(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    cum = np.cumsum(weights)
    cum[-1] = 1.
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, u, side='right'), n - 1)

def _advance(params: _Params, inner: _Inner, y: float, log_F: float, beta: float,
             cap: int, rng_factory) -> Tuple[_Inner, np.ndarray]:
    """One branching step for every particle

    Returns the new inner state and the log of each particle's weight
    increment ``sum_m w_m * (beta * f_m / F + 1 - beta)``
    """
    m_pred, P_pred = _predict(params, inner)
    N, M = m_pred.shape
    parts = []
    if beta > 0:
        logf, m_inc, P_inc = _measurement(params, m_pred, P_pred, y)
        lw = inner.logw + math.log(beta) + logf - log_F
        parts.append((m_inc, P_inc, lw, True))
    if beta < 1:
        lw = inner.logw + math.log(1 - beta)
        parts.append((m_pred, P_pred, lw, False))
    mean = np.concatenate([p[0] for p in parts], axis=1)
    var = np.concatenate([p[1] for p in parts], axis=1)
    logw = np.concatenate([p[2] for p in parts], axis=1)
    anc = np.concatenate([
        np.concatenate([inner.anc, np.full((N, M, 1), flag)], axis=2)
        for *_, flag in parts
    ], axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        log_incr = logsumexp(logw, axis=1)
    dead = ~np.isfinite(log_incr)
    log_incr[dead] = -np.inf
    norm = np.where(dead, 0., log_incr)
    logw = logw - norm[:, None]
    if dead.any():
        logw[dead] = -math.log(logw.shape[1])
    if logw.shape[1] > cap:
        idx = _systematic_rows(logw, cap, rng_factory())
        rows = np.arange(N)[:, None]
        mean, var, anc = mean[rows, idx], var[rows, idx], anc[rows, idx]
        logw = np.full((N, cap), -math.log(cap))
    return _Inner(mean, var, logw, anc), log_incr


@dataclass
class ThetaParticle:
    """Read-only view of one parameter particle"""
    theta: Optional[np.ndarray]
    weight: float #: Normalized outer weight
    inner_weights: np.ndarray
    means: np.ndarray #: Component state means
    vars: np.ndarray #: Component state variances
    ancestry: np.ndarray
    """Inclusion history of each component, shape ``(M, L)``"""


@dataclass
class SmoothedInclusion:
    """Smoothed inclusion probabilities ``P(C_t = 1 | y^T)``"""
    probs: np.ndarray
    beta: float

    def __len__(self):
        return len(self.probs)


@dataclass(frozen=True)
class AverageForecast:
    """Predictive summary of the h-step average made at one origin"""
    mean: float
    var: float
    realized: float #: Realized h-step average (``nan`` past the sample end)
    log_density: float #: Predictive log density at :attr:`realized`


@dataclass
class StepSummary:
    """Per-step record produced by :func:`fit_rmd_n`"""
    t: int #: 1-based time index
    label: str
    obs: float
    log_predictive: float #: ``log F`` of the observation
    filtered_mean: float
    filtered_var: float
    ess: float #: Outer effective sample size after the update
    forecasts: Dict[int, AverageForecast] = field(default_factory=dict)


class ThetaParticleSystem(Dispatcher):
    """Weighted parameter particles with conditional Gaussian-sum filters

    :Events:
        .. event:: on_step(system: ThetaParticleSystem, t: int)

            Fired after each :func:`rmd_n_update`

        .. event:: on_resample(system: ThetaParticleSystem, t: int, ess: float)

            Fired after outer resampling and rejuvenation, with the
            effective sample size that triggered it
    """
    _events_ = ['on_step', 'on_resample']

    def __init__(self, models: Sequence[LinearGaussianModel], beta: float,
                 config: Optional[RmdnConfig] = None,
                 family: Optional[ModelFamily] = None,
                 thetas: Optional[np.ndarray] = None,
                 prior: Optional[ThetaPrior] = None,
                 expected_length: Optional[int] = None):
        if not math.isfinite(beta) or not 0 <= beta <= 1:
            raise InvalidInputError('beta must be in [0, 1]', beta)
        if not len(models):
            raise InvalidInputError('At least one particle is required')
        if config is None:
            config = RmdnConfig(n_theta=len(models))
        self.beta = beta
        self.config = config
        self.family = family
        self.prior = prior
        self.thetas = None if thetas is None else np.array(thetas, dtype=float)
        self.expected_length = expected_length
        self.params = _Params.from_models(models)
        self.init_mean = np.array([m.init_mean for m in models])
        self.init_var = np.array([m.init_var for m in models])
        self.inner = _Inner.initial(self.init_mean, self.init_var)
        n = len(models)
        self.log_weights = np.full(n, -math.log(n))
        self.loglik = np.zeros(n)
        self.log_evidence = 0.
        self.t = 0
        self.n_resample = 0
        self.obs_history: list[float] = []
        self.log_F_history: list[float] = []
        self._frozen_probs: list[float] = []

    @classmethod
    def from_prior(cls, family: ModelFamily, beta: float, config: Optional[RmdnConfig] = None,
                   init_mean: float = 0., init_var: float = DEFAULT_INIT_VAR,
                   expected_length: Optional[int] = None) -> ThetaParticleSystem:
        """Draw :attr:`RmdnConfig.n_theta` particles from the prior"""
        if config is None:
            config = RmdnConfig()
        prior = config.prior if config.prior is not None else ThetaPrior(family)
        thetas = prior.sample(stream(config.seed, _PRIOR), config.n_theta)
        models = [instantiate(family, th, init_mean, init_var) for th in thetas]
        return cls(models, beta, config, family=family, thetas=thetas,
                   prior=prior, expected_length=expected_length)

    @classmethod
    def from_models(cls, models: Sequence[LinearGaussianModel], beta: float,
                    config: Optional[RmdnConfig] = None,
                    expected_length: Optional[int] = None) -> ThetaParticleSystem:
        """Equal-weight particles at fixed models (no rejuvenation)"""
        if config is None:
            config = RmdnConfig(n_theta=len(models))
        return cls(models, beta, config, expected_length=expected_length)

    def __len__(self):
        return len(self.log_weights)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        """Effective sample size of the outer weights"""
        w = self.weights
        return float(1 / np.dot(w, w))

    @property
    def n_components(self) -> int:
        return self.inner.mean.shape[1]

    @property
    def can_rejuvenate(self) -> bool:
        return (self.family is not None and self.thetas is not None
                and self.prior is not None and not self.prior.is_point_mass)

    def particle(self, i: int) -> ThetaParticle:
        return ThetaParticle(
            theta=None if self.thetas is None else self.thetas[i].copy(),
            weight=float(self.weights[i]),
            inner_weights=np.exp(self.inner.logw[i]),
            means=self.inner.mean[i].copy(),
            vars=self.inner.var[i].copy(),
            ancestry=self.inner.anc[i].copy(),
        )

    def _joint_weights(self) -> np.ndarray:
        return self.weights[:, None] * np.exp(self.inner.logw)

    def filtered_moments(self) -> Tuple[float, float]:
        """Mean and variance of the current filtered state mixture"""
        w = self._joint_weights()
        mean = float((w * self.inner.mean).sum())
        var = float((w * (self.inner.var + (self.inner.mean - mean) ** 2)).sum())
        return mean, var

    def log_predictive_density(self, y: float) -> float:
        """``log F(y)`` for the next observation"""
        if not math.isfinite(y):
            raise InvalidInputError('Observation must be finite', y)
        return _log_predictive(self.log_weights, self.params, self.inner, y)

    def forecast_average(self, h: int) -> ForecastMixture:
        """Predictive mixture of the h-step average over every component

        Each component is Gaussian. A scale-mixture measurement (``uc-t``)
        contributes its variance only, as in :func:`~rmdfilter.statespace.forecast`
        """
        m, v = forecast_average_moments(
            self.params.c[:, None], self.params.a[:, None], self.params.q2[:, None],
            self.params.r2[:, None], self.inner.mean, self.inner.var, h,
        )
        return ForecastMixture.from_components(self._joint_weights(), m, v)

    def posterior_quantiles(self, q: Iterable[float]) -> Dict[str, np.ndarray]:
        """Weighted quantiles of every parameter, keyed by parameter name"""
        if self.thetas is None or self.family is None:
            raise InvalidStateError('Particles carry no parameter vectors')
        q = np.asarray(list(q), dtype=float)
        w = self.weights
        return {
            name: weighted_quantile(self.thetas[:, j], w, q)
            for j, name in enumerate(self.family.param_names)
        }

    def inclusion_probs(self) -> np.ndarray:
        """Current weighted ancestry frequencies for every elapsed step"""
        w = self._joint_weights()
        live = np.einsum('nm,nml->l', w, self.inner.anc.astype(float))
        return np.concatenate([np.array(self._frozen_probs), np.clip(live, 0., 1.)])

    def _freeze_lag(self):
        lag = self.config.fixed_lag
        if lag is None or self.inner.anc.shape[2] <= lag:
            return
        n_drop = self.inner.anc.shape[2] - lag
        w = self._joint_weights()
        old = np.einsum('nm,nml->l', w, self.inner.anc[:, :, :n_drop].astype(float))
        self._frozen_probs.extend(float(min(max(p, 0.), 1.)) for p in old)
        self.inner.anc = np.ascontiguousarray(self.inner.anc[:, :, n_drop:])

    def update(self, y: float):
        """Assimilate the next observation (see :func:`rmd_n_update`)"""
        log_F = self.log_predictive_density(y)
        if not math.isfinite(log_F):
            raise FilterDegeneracyError('Predictive density is zero', y)
        t = self.t
        rng_factory = lambda: stream(self.config.seed, _INNER, t)
        inner, log_incr = _advance(
            self.params, self.inner, y, log_F, self.beta, self.config.inner_cap, rng_factory,
        )
        with np.errstate(invalid='ignore'):
            log_weights = self.log_weights + log_incr
            norm = logsumexp(log_weights)
        if not math.isfinite(norm):
            raise FilterDegeneracyError('All particle weights are zero', t + 1)
        self.inner = inner
        self.log_weights = log_weights - norm
        self.loglik = self.loglik + log_incr
        if self.beta == 1:
            self.log_evidence += log_F
        elif self.beta > 0:
            self.log_evidence += float(np.logaddexp(math.log(self.beta) + log_F, math.log(1 - self.beta)))
        self.obs_history.append(float(y))
        self.log_F_history.append(log_F)
        self.t += 1
        self._freeze_lag()
        self.emit('on_step', self, self.t)

    def _rerun(self, models: Sequence[LinearGaussianModel], move: int) -> Tuple[_Params, _Inner, np.ndarray]:
        params = _Params.from_models(models)
        inner = _Inner.initial(self.init_mean, self.init_var)
        loglik = np.zeros(len(models))
        t_now = self.t
        for s, (y, log_F) in enumerate(zip(self.obs_history, self.log_F_history)):
            rng_factory = lambda s=s: stream(self.config.seed, _RERUN, t_now, move, s)
            inner, log_incr = _advance(params, inner, y, log_F, self.beta, self.config.inner_cap, rng_factory)
            loglik += log_incr
        lag = self.inner.anc.shape[2]
        if inner.anc.shape[2] != lag:
            inner.anc = np.ascontiguousarray(inner.anc[:, :, inner.anc.shape[2] - lag:])
        return params, inner, loglik

    def resample_move(self):
        """Resample the outer particles and rejuvenate them with
        random-walk Metropolis moves on the unconstrained parameters

        Raises:
            FilterDegeneracyError: If the effective sample size is not finite,
                or if every parameter particle is identical after the moves
        """
        ess = self.ess
        if not math.isfinite(ess):
            raise FilterDegeneracyError('Effective sample size is not finite', ess)
        t = self.t
        w = self.weights
        idx = _systematic(w, stream(self.config.seed, _OUTER, t))
        move_cov = None
        if self.can_rejuvenate and self.config.n_moves > 0 and len(w) > 1:
            z_all = np.stack([self.family.to_unconstrained(th) for th in self.thetas])
            move_cov = np.atleast_2d(np.cov(z_all.T, aweights=w, bias=True))
        self.params = self.params.take(idx)
        self.inner = self.inner.take(idx)
        self.loglik = self.loglik[idx]
        self.init_mean = self.init_mean[idx]
        self.init_var = self.init_var[idx]
        if self.thetas is not None:
            self.thetas = self.thetas[idx]
        n = len(idx)
        self.log_weights = np.full(n, -math.log(n))
        self.n_resample += 1
        if move_cov is not None:
            self._rejuvenate(move_cov)
            if len(np.unique(self.thetas, axis=0)) == 1:
                raise FilterDegeneracyError(
                    'Parameter particles collapsed to a single value', t,
                )
        logger.debug(f'rmd-n t={t}: resampled at ess={ess:.1f}')
        self.emit('on_resample', self, t, ess)

    def _rejuvenate(self, cov: np.ndarray):
        family, prior = self.family, self.prior
        n, d = self.thetas.shape
        prop_cov = self.config.proposal_scale * cov + 1e-8 * np.eye(d)
        chol = np.linalg.cholesky(prop_cov)
        z = np.stack([family.to_unconstrained(th) for th in self.thetas])
        log_prior = prior.logpdf_unconstrained(z)
        n_accept = 0
        for move in range(self.config.n_moves):
            rng = stream(self.config.seed, _MOVE, self.t, move)
            z_new = z + rng.standard_normal((n, d)) @ chol.T
            thetas_new = []
            models_new = []
            valid = np.ones(n, dtype=bool)
            for i, zi in enumerate(z_new):
                try:
                    th = family.from_unconstrained(zi)
                    models_new.append(instantiate(family, th, self.init_mean[i], self.init_var[i]))
                except (InvalidInputError, OverflowError):
                    valid[i] = False
                    th = self.thetas[i]
                    models_new.append(instantiate(family, th, self.init_mean[i], self.init_var[i]))
                thetas_new.append(th)
            params_new, inner_new, loglik_new = self._rerun(models_new, move)
            log_prior_new = prior.logpdf_unconstrained(z_new)
            with np.errstate(invalid='ignore'):
                log_ratio = (loglik_new + log_prior_new) - (self.loglik + log_prior)
            log_u = np.log(stream(self.config.seed, _ACCEPT, self.t, move).random(n))
            accept = valid & np.isfinite(log_ratio) & (log_u < log_ratio)
            self.thetas[accept] = np.array(thetas_new)[accept]
            self.params.put(accept, params_new)
            self.inner.put(accept, inner_new)
            self.loglik[accept] = loglik_new[accept]
            z[accept] = z_new[accept]
            log_prior[accept] = log_prior_new[accept]
            n_accept += int(accept.sum())
        logger.debug(f'rmd-n t={self.t}: acceptance {n_accept / (n * self.config.n_moves):.2f}')


def predictive_density(system: ThetaParticleSystem, y: float) -> float:
    """One-step predictive density ``F(y)`` of the system

    The weighted average of the Gaussian predictive densities of every outer
    particle and inner component.

    Raises:
        InvalidInputError: If ``y`` is not finite
    """
    return math.exp(system.log_predictive_density(y))

def rmd_n_update(system: ThetaParticleSystem, y: float) -> ThetaParticleSystem:
    """Assimilate one observation into the system (in place)

    Every inner component branches into an include branch weighted by
    ``beta * f / F`` and an exclude branch weighted by ``1 - beta``. Outer
    weights are multiplied by each particle's total increment. Inner
    components are resampled down to :attr:`RmdnConfig.inner_cap` with their
    inclusion histories.

    Raises:
        InvalidInputError: If ``y`` is not finite
        FilterDegeneracyError: If every weight is numerically zero
    """
    system.update(y)
    return system

def smoothed_inclusion(system: ThetaParticleSystem) -> SmoothedInclusion:
    """Smoothed inclusion probabilities from the weighted ancestry

    Raises:
        InvalidStateError: If filtering has not reached the expected length
    """
    if system.t == 0:
        raise InvalidStateError('No observations have been filtered')
    if system.expected_length is not None and system.t < system.expected_length:
        raise InvalidStateError(
            f'Filtering stopped at {system.t} of {system.expected_length}', system.t,
        )
    return SmoothedInclusion(system.inclusion_probs(), system.beta)

def flag_outliers(inclusion: SmoothedInclusion, threshold: float = OUTLIER_THRESHOLD) -> np.ndarray:
    """Positions whose smoothed inclusion probability is below ``threshold``

    >>> flag_outliers(SmoothedInclusion(np.array([0.9, 0.001, 0.4]), 0.15))
    array([1])
    """
    return np.flatnonzero(inclusion.probs < threshold)

def _record_forecasts(system: ThetaParticleSystem, series: TimeSeries, t: int,
                      horizons: Sequence[int]) -> Dict[int, AverageForecast]:
    out = {}
    T = len(series)
    for h in horizons:
        mix = system.forecast_average(h)
        if t + h <= T:
            realized = float(series.values[t:t + h].mean())
            log_density = mix.logpdf(realized)
        else:
            realized = log_density = float('nan')
        out[h] = AverageForecast(mix.mean, mix.var, realized, log_density)
    return out

def fit_rmd_n(family: ModelFamily, series: TimeSeries, beta: float,
              config: Optional[RmdnConfig] = None,
              system: Optional[ThetaParticleSystem] = None,
              ) -> Tuple[ThetaParticleSystem, SmoothedInclusion, list[StepSummary]]:
    """Run the particle system over a series

    Parameter particles are drawn from the prior, updated with
    :func:`rmd_n_update` at each step and, when the effective sample size
    falls below ``ess_threshold * n_theta``, resampled and moved with
    random-walk Metropolis steps. The ``x_0`` prior is centered on the first
    observation.

    Arguments:
        family: The model family
        series: The observations
        beta: Inclusion probability in ``[0, 1]``
        config: Particle settings
        system: An unfiltered system to use instead of drawing from the prior
            (listeners may already be bound to it)

    Returns:
        (ThetaParticleSystem, SmoothedInclusion, list[StepSummary]):
        system, inclusion, steps
    """
    if config is None:
        config = RmdnConfig()
    if system is None:
        system = ThetaParticleSystem.from_prior(
            family, beta, config, init_mean=float(series.values[0]),
            expected_length=len(series),
        )
    elif system.t != 0:
        raise InvalidStateError('System has already been updated', system.t)
    else:
        system.expected_length = len(series)
    logger.debug(f'rmd-n {family} beta={beta}: T={len(series)}, n_theta={len(system)}')
    steps = []
    n = len(system)
    for t, (label, y) in enumerate(zip(series.index, series.values), start=1):
        system.update(float(y))
        ess = system.ess
        if ess < config.ess_threshold * n:
            system.resample_move()
        mean, var = system.filtered_moments()
        steps.append(StepSummary(
            t=t, label=label, obs=float(y), log_predictive=system.log_F_history[-1],
            filtered_mean=mean, filtered_var=var, ess=ess,
            forecasts=_record_forecasts(system, series, t, config.horizons),
        ))
    return system, smoothed_inclusion(system), steps
